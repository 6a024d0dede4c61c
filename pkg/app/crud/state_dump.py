"""
State dumps for probing: `states.bin` holds per-side arrays in the tensor blob
format, `index.jsonl` one line per dumped position.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from app.core.exceptions import DataError
from app.crud.tensor_io import read_tensors, write_tensors

logger = logging.getLogger(__name__)

STATES_FILE = "states.bin"
INDEX_FILE = "index.jsonl"

_ARRAYS = ("states", "embeddings", "token_ids", "freq_ranks", "sentence_ids", "positions", "unk")


@dataclass
class SideDump:
    """
    Dumped positions of one sub-network. `states` is P x (n_layers + 1) x d
    with H_0 at layer index 0; `embeddings` holds the raw table rows.
    """
    states: np.ndarray
    embeddings: np.ndarray
    token_ids: np.ndarray
    tags: List[str]
    freq_ranks: np.ndarray
    sentence_ids: np.ndarray
    positions: np.ndarray
    unk: np.ndarray

    @property
    def n_positions(self) -> int:
        return self.states.shape[0]

    @property
    def n_layers(self) -> int:
        return self.states.shape[1] - 1

    def layer(self, index: int) -> np.ndarray:
        if not 0 <= index <= self.n_layers:
            raise DataError(f"layer {index} not in dump with layers 0..{self.n_layers}")
        return self.states[:, index, :]


@dataclass
class StateDump:
    sides: Dict[str, SideDump] = field(default_factory=dict)

    def __getitem__(self, side: str) -> SideDump:
        if side not in self.sides:
            raise DataError(f"no {side} states in dump")
        return self.sides[side]


def save_state_dump(dump: StateDump, out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for side, data in dump.sides.items():
        for name in _ARRAYS:
            arrays[f"{side}/{name}"] = getattr(data, name)
    with (out_dir / STATES_FILE).open("wb") as fh:
        write_tensors(fh, arrays)
    with (out_dir / INDEX_FILE).open("w", encoding="utf-8") as fh:
        for side, data in dump.sides.items():
            for i in range(data.n_positions):
                row = {
                    "side": side,
                    "sentence": int(data.sentence_ids[i]),
                    "position": int(data.positions[i]),
                    "token": int(data.token_ids[i]),
                    "tag": data.tags[i],
                    "freq_rank": int(data.freq_ranks[i]),
                    "unk": bool(data.unk[i]),
                }
                fh.write(json.dumps(row) + "\n")
    logger.info(f"State dump written to {out_dir}: " + ", ".join(f"{s}={d.n_positions}" for s, d in dump.sides.items()))
    return out_dir


def load_state_dump(out_dir: Union[str, Path]) -> StateDump:
    out_dir = Path(out_dir)
    for name in (STATES_FILE, INDEX_FILE):
        if not (out_dir / name).exists():
            raise DataError(f"state dump file not found: {out_dir / name}")
    with (out_dir / STATES_FILE).open("rb") as fh:
        arrays = read_tensors(fh)
    tags: Dict[str, List[str]] = {}
    with (out_dir / INDEX_FILE).open(encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            tags.setdefault(row["side"], []).append(row["tag"])
    dump = StateDump()
    for side in sorted({key.split("/", 1)[0] for key in arrays}):
        fields = {name: arrays[f"{side}/{name}"] for name in _ARRAYS}
        dump.sides[side] = SideDump(tags=tags.get(side, []), **fields)
    return dump
