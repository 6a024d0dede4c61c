import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from app.core import config
from app.core.exceptions import ConfigError, DataError
from app.crud.checkpoint import load_checkpoint, resolve_checkpoint
from app.data.bpe import apply_bpe, undo_bpe
from app.data.vocab import Vocabulary
from app.models.transformer import Transformer
from app.schemas.translate import Hypothesis
from app.services.decoding import beam_search, score_pairs

logger = logging.getLogger(__name__)


@dataclass
class Translator:
    """A loaded checkpoint plus its vocabulary; text in, text out."""
    model: Transformer
    vocab: Vocabulary
    checkpoint: Path

    @classmethod
    def load(cls, checkpoint: Union[str, Path], vocab: Optional[Union[str, Path]] = None) -> "Translator":
        path = resolve_checkpoint(checkpoint)
        loaded = load_checkpoint(path)
        vocabulary = Vocabulary.load(vocab) if vocab else loaded.vocab
        if vocabulary is None:
            raise DataError(f"{path} carries no vocabulary; pass one explicitly")
        if len(vocabulary) != loaded.config.vocab_size:
            raise DataError(f"vocabulary has {len(vocabulary)} entries, model expects {loaded.config.vocab_size}")
        logger.info(f"Loaded {loaded.config.variant.value} model from {path} (step {loaded.step})")
        return cls(loaded.build_model(), vocabulary, path)

    def segment(self, sentence: str, segmented: bool = False) -> List[int]:
        line = apply_bpe(sentence, self.vocab.merges) if self.vocab.merges and not segmented else sentence
        ids = self.vocab.encode(line)
        if not ids:
            raise DataError("cannot translate an empty sentence")
        return ids

    def translate(self, sentences: Sequence[str], beam_size: int = 4, max_len: Optional[int] = None,
                  len_penalty: float = 1.0, segmented: bool = False) -> List[Hypothesis]:
        """`segmented` marks input that is already BPE-segmented (corpus files)."""
        hypotheses = []
        for sentence in sentences:
            hyp = beam_search(self.model, self.segment(sentence, segmented), beam_size, max_len, len_penalty)
            hyp.text = undo_bpe(self.vocab.decode(hyp.tokens))
            hypotheses.append(hyp)
        return hypotheses

    def score(self, pairs: Sequence[Tuple[str, str]], normalize: bool = False) -> List[float]:
        encoded = [(self.segment(src), self.vocab.encode(apply_bpe(tgt, self.vocab.merges) if self.vocab.merges else tgt))
                   for src, tgt in pairs]
        return score_pairs(self.model, encoded, normalize=normalize)


# Served translator, loaded on first use
_translator: Optional[Translator] = None
_lock = threading.Lock()


def get_translator() -> Translator:
    """Shared translator for the API, loaded from LEXSHORT_CHECKPOINT / LEXSHORT_VOCAB."""
    global _translator
    if _translator is None:
        with _lock:
            if _translator is None:
                if not config.SERVED_CHECKPOINT:
                    raise ConfigError("no model to serve: set LEXSHORT_CHECKPOINT")
                _translator = Translator.load(config.SERVED_CHECKPOINT, config.SERVED_VOCAB)
    return _translator


def set_translator(translator: Optional[Translator]) -> None:
    global _translator
    _translator = translator


def loaded_translator() -> Optional[Translator]:
    return _translator
