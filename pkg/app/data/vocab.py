import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from app.core.exceptions import DataError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)


class Vocabulary:
    """
    Dense token <-> id mapping shared by source and target.

    Ids 0..3 are always PAD, BOS, EOS, UNK. Ordinary tokens follow in order of
    decreasing training frequency (ties broken alphabetically), so id order is
    also frequency-rank order. `merges` holds the BPE merge list the corpus was
    segmented with, if any.
    """

    def __init__(self, tokens: Sequence[str], counts: Optional[Dict[str, int]] = None,
                 merges: Optional[List[Tuple[str, str]]] = None):
        self.itos: List[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi: Dict[str, int] = {token: index for index, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")
        self.counts: Dict[str, int] = dict(counts or {})
        self.merges: List[Tuple[str, str]] = list(merges or [])

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1,
              merges: Optional[List[Tuple[str, str]]] = None) -> "Vocabulary":
        counter = Counter()
        for sentence in sentences:
            counter.update(sentence)
        if not counter:
            raise DataError("cannot build a vocabulary from an empty corpus")
        kept = sorted((t for t, c in counter.items() if c >= min_count and t not in RESERVED),
                      key=lambda t: (-counter[t], t))
        logger.info(f"Built vocabulary: {len(kept)} tokens (+{len(RESERVED)} reserved) from {sum(counter.values())} running tokens")
        return cls(kept, {t: counter[t] for t in kept}, merges)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Union[str, Sequence[str]]) -> List[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        ids = [self.stoi.get(token, UNK_ID) for token in tokens]
        unknown = sum(1 for i in ids if i == UNK_ID)
        if unknown:
            logger.warning(f"{unknown} out-of-vocabulary token(s) mapped to {UNK}")
        return ids

    def decode(self, ids: Iterable[int], strip: bool = True) -> str:
        """Tokens joined by spaces; stops at EOS and drops PAD/BOS when `strip`."""
        out = []
        for index in ids:
            index = int(index)
            if strip:
                if index == EOS_ID:
                    break
                if index in (PAD_ID, BOS_ID):
                    continue
            if not 0 <= index < len(self.itos):
                raise DataError(f"token id {index} outside vocabulary of size {len(self.itos)}")
            out.append(self.itos[index])
        return " ".join(out)

    def frequency_rank(self, index: int) -> int:
        """0 for the most frequent ordinary token; reserved ids rank last."""
        if index < len(RESERVED):
            return len(self.itos)
        return index - len(RESERVED)

    def count(self, index: int) -> int:
        return self.counts.get(self.itos[index], 0)

    def to_dict(self) -> dict:
        return {
            "tokens": self.itos[len(RESERVED):],
            "counts": self.counts,
            "merges": [list(pair) for pair in self.merges],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        try:
            return cls(payload["tokens"], payload.get("counts"), [tuple(p) for p in payload.get("merges", [])])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed vocabulary payload: {exc}") from None

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise DataError(f"vocabulary file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"vocabulary file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(payload)
