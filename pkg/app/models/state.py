from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DataError
from app.core.tensor import Tensor
from app.data.vocab import BOS_ID, EOS_ID, PAD_ID


@dataclass
class LayerState:
    """
    Per-layer hidden sequences of one sub-network.

    hidden[0] is the embedding output H_0 and hidden[l] the feed-forward
    output of layer l. `embeddings` is the shortcut source E and
    `table_embeddings` the raw table rows (probe/cosine reference). `keep`
    marks non-padding positions (b x t).
    """
    tokens: np.ndarray
    keep: np.ndarray
    embeddings: Tensor
    table_embeddings: Tensor
    hidden: List[Tensor] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.hidden[-1]

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1


@dataclass
class GateRecord:
    side: str
    kind: str
    layer: int
    r_key: np.ndarray
    r_value: np.ndarray
    keep: Optional[np.ndarray] = None


class GateRecorder:
    """Collects gate activations (r^K, r^V) emitted during a forward pass."""

    def __init__(self):
        self.records: List[GateRecord] = []

    def add(self, record: GateRecord) -> None:
        self.records.append(record)

    def clear(self) -> None:
        self.records.clear()

    def layer_means(self) -> Dict[str, float]:
        """
        Mean r over non-padding positions of every recorded pass, keyed
        `<side>.<kind>.l<layer>`; micro-batches count by their positions.
        """
        totals: Dict[str, Tuple[float, int]] = {}
        for record in self.records:
            values = np.concatenate([record.r_key[..., None], record.r_value[..., None]], axis=-1)
            if record.keep is not None:
                values = values[record.keep]
            key = f"{record.side}.{record.kind}.l{record.layer}"
            total, count = totals.get(key, (0.0, 0))
            totals[key] = (total + float(values.sum()), count + values.size)
        return {key: total / count for key, (total, count) in totals.items() if count}


@dataclass
class Batch:
    """
    Padded parallel batch. Sources end in EOS; targets are shifted so that
    `tgt_in` starts with BOS and `tgt_out` ends with EOS.
    """
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def src_keep(self) -> np.ndarray:
        return self.src != PAD_ID

    @property
    def tgt_keep(self) -> np.ndarray:
        return self.tgt_out != PAD_ID

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def target_tokens(self) -> int:
        return int(self.tgt_keep.sum())

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> "Batch":
        if not pairs:
            raise DataError("cannot build an empty batch")
        for index, (src, _) in enumerate(pairs):
            if len(src) == 0:
                raise DataError(f"empty source sentence at batch row {index}")
        sources = [list(src) + [EOS_ID] for src, _ in pairs]
        tgt_in = [[BOS_ID] + list(tgt) for _, tgt in pairs]
        tgt_out = [list(tgt) + [EOS_ID] for _, tgt in pairs]
        return cls(pad_rows(sources), pad_rows(tgt_in), pad_rows(tgt_out))


def pad_rows(rows: Sequence[Sequence[int]], width: Optional[int] = None) -> np.ndarray:
    width = width or max(len(row) for row in rows)
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for index, row in enumerate(rows):
        out[index, :len(row)] = row
    return out


@dataclass
class DecoderCache:
    """
    Incremental decoder state: per-head K'/V' arrays keyed by
    (layer, "self" | "cross"), each b x heads x t x d_k.
    """
    source_keep: np.ndarray
    length: int = 0
    entries: Dict[Tuple[int, str], Tuple[Tensor, Tensor]] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.source_keep.shape[0]

    def select(self, rows: Sequence[int]) -> "DecoderCache":
        """Cache whose batch row i is row `rows[i]` of this one (beam reordering)."""
        rows = np.asarray(rows, dtype=np.int64)
        entries = {
            key: (Tensor(k.data[rows], dtype=k.dtype), Tensor(v.data[rows], dtype=v.dtype))
            for key, (k, v) in self.entries.items()
        }
        return DecoderCache(self.source_keep[rows], self.length, entries)
