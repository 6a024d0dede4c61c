import logging
import queue
from threading import Event, Thread
from typing import Iterator, List, Optional, Sequence, Tuple

from app.core.exceptions import DataError
from app.core.rng import Rng
from app.data.vocab import Vocabulary
from app.models.state import Batch
from app.schemas.data import SentencePair

logger = logging.getLogger(__name__)

Example = Tuple[List[int], List[int]]

_STOP = object()


def encode_pairs(pairs: Sequence[SentencePair], vocab: Vocabulary) -> List[Example]:
    return [(vocab.encode(pair.src), vocab.encode(pair.tgt)) for pair in pairs]


def pack_batches(examples: Sequence[Example], batch_tokens: int, order: Optional[Sequence[int]] = None) -> List[Batch]:
    """
    Greedily pack examples (in `order`) into batches whose padded size,
    rows x (longest source + longest target + 2), stays within `batch_tokens`.
    A single over-long example still forms its own batch.
    """
    if not examples:
        raise DataError("no training examples to batch")
    order = range(len(examples)) if order is None else order
    batches, rows = [], []
    longest_src = longest_tgt = 0
    for index in order:
        src, tgt = examples[index]
        new_src, new_tgt = max(longest_src, len(src)), max(longest_tgt, len(tgt))
        if rows and (len(rows) + 1) * (new_src + new_tgt + 2) > batch_tokens:
            batches.append(Batch.from_pairs(rows))
            rows, new_src, new_tgt = [], len(src), len(tgt)
        rows.append((src, tgt))
        longest_src, longest_tgt = new_src, new_tgt
    if rows:
        batches.append(Batch.from_pairs(rows))
    return batches


def batch_sequence(examples: Sequence[Example], batch_tokens: int, seed: int, start: int = 0) -> Iterator[Tuple[int, Batch]]:
    """
    Endless (micro-step, batch) sequence: every epoch packs a fresh seeded
    permutation. Batch i is the same for a given seed wherever iteration
    starts, so resumed runs see the data a continuous run would.
    """
    rng = Rng(seed).split("batches")
    index, epoch = 0, 0
    while True:
        order = rng.split(f"epoch.{epoch}").permutation(len(examples))
        batches = pack_batches(examples, batch_tokens, order)
        if index + len(batches) <= start:
            index += len(batches)
            epoch += 1
            continue
        for batch in batches:
            if index >= start:
                yield index, batch
            index += 1
        epoch += 1


class BatchProducer:
    """
    Background thread filling a bounded queue with micro-batches; `put`
    blocks while the queue is full.
    """

    def __init__(self, examples: Sequence[Example], batch_tokens: int, seed: int, start: int = 0, maxsize: int = 8):
        self._queue: "queue.Queue" = queue.Queue(maxsize=maxsize)
        self._stop = Event()
        self._source = batch_sequence(examples, batch_tokens, seed, start)
        self._thread: Optional[Thread] = None
        self._error: Optional[BaseException] = None

    def _produce(self) -> None:
        try:
            for item in self._source:
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except Exception as e:
            logger.error(f"Batch producer failed: {e}")
            self._error = e
            self._queue.put(_STOP)

    def start(self) -> "BatchProducer":
        if self._thread is None or not self._thread.is_alive():
            self._thread = Thread(target=self._produce, name="batch-producer", daemon=True)
            self._thread.start()
            logger.info("Batch producer thread started")
        return self

    def get(self) -> Tuple[int, Batch]:
        item = self._queue.get()
        if item is _STOP:
            raise self._error
        return item

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "BatchProducer":
        return self.start()

    def __exit__(self, *exc) -> bool:
        self.close()
        return False
