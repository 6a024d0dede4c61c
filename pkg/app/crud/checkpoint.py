"""
Checkpoint persistence.

A checkpoint file starts with one JSON manifest line (format, model config,
config hash, step, seed, parameter index, free-form meta) followed by tensor
records. Optimizer moments, when saved, are stored as `optim/m/<name>` and
`optim/v/<name>` records.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import CheckpointError
from app.crud.tensor_io import read_tensors, write_tensors
from app.data.vocab import Vocabulary
from app.models.transformer import Transformer
from app.schemas.model import ModelConfig

logger = logging.getLogger(__name__)

FORMAT = "lexshort-checkpoint/1"
LATEST = "latest.json"
OPTIM_PREFIX = "optim/"


@dataclass
class Checkpoint:
    path: Path
    config: ModelConfig
    step: int
    params: Dict[str, np.ndarray]
    manifest: Dict[str, Any]
    optimizer: Optional[Dict[str, Any]] = None
    vocab: Optional[Vocabulary] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    def build_model(self) -> Transformer:
        model = Transformer(self.config)
        model.load_state_dict(self.params)
        return model


def checkpoint_name(step: int) -> str:
    return f"checkpoint-{step:08d}.ckpt"


def save_checkpoint(
    path: Union[str, Path],
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    step: int,
    vocab: Optional[Vocabulary] = None,
    optimizer: Optional[Mapping[str, Any]] = None,
    meta: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write a checkpoint atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(params)
    manifest = {
        "format": FORMAT,
        "config": config.model_dump(mode="json"),
        "config_hash": config.hash(),
        "step": int(step),
        "seed": config.seed,
        "parameters": [{"name": n, "shape": list(a.shape), "dtype": a.dtype.name} for n, a in params.items()],
        "meta": dict(meta or {}),
        "vocab": vocab.to_dict() if vocab is not None else None,
        "optimizer": None,
    }
    if optimizer is not None:
        manifest["optimizer"] = {"t": int(optimizer["t"])}
        for moment in ("m", "v"):
            for name, array in optimizer[moment].items():
                arrays[f"{OPTIM_PREFIX}{moment}/{name}"] = array

    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write((json.dumps(manifest) + "\n").encode("utf-8"))
        written = write_tensors(fh, arrays)
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path.name} at step {step} ({written} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path} has no readable manifest: {exc}") from None
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
        arrays = read_tensors(fh)

    try:
        config = ModelConfig(**manifest["config"])
    except (ValidationError, KeyError) as exc:
        raise CheckpointError(f"{path}: invalid model config in manifest: {exc}") from None
    if config.hash() != manifest.get("config_hash"):
        raise CheckpointError(f"{path}: config hash does not match the stored config")

    params = {n: a for n, a in arrays.items() if not n.startswith(OPTIM_PREFIX)}
    expected = {entry["name"] for entry in manifest.get("parameters", [])}
    if expected != set(params):
        raise CheckpointError(f"{path}: tensor records do not match the parameter index")

    optimizer = None
    if manifest.get("optimizer") is not None:
        optimizer = {"t": manifest["optimizer"]["t"], "m": {}, "v": {}}
        for name, array in arrays.items():
            if name.startswith(OPTIM_PREFIX):
                moment, param = name[len(OPTIM_PREFIX):].split("/", 1)
                optimizer[moment][param] = array

    vocab = Vocabulary.from_dict(manifest["vocab"]) if manifest.get("vocab") else None
    return Checkpoint(path, config, int(manifest["step"]), params, manifest, optimizer, vocab, manifest.get("meta", {}))


def write_latest(run_dir: Union[str, Path], checkpoint: Path, step: int) -> None:
    run_dir = Path(run_dir)
    payload = {"checkpoint": checkpoint.name, "step": int(step)}
    (run_dir / LATEST).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def read_latest(run_dir: Union[str, Path]) -> Optional[Path]:
    manifest = Path(run_dir) / LATEST
    if not manifest.exists():
        return None
    try:
        payload = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest} is not valid JSON: {exc}") from None
    return Path(run_dir) / payload["checkpoint"]


def list_checkpoints(run_dir: Union[str, Path]) -> List[Path]:
    """Step-stamped checkpoints of a run, oldest first."""
    return sorted(Path(run_dir).glob("checkpoint-*.ckpt"))


def resolve_checkpoint(path: Union[str, Path]) -> Path:
    """Accept a checkpoint file or a run directory (resolved through its latest manifest)."""
    path = Path(path)
    if path.is_dir():
        latest = read_latest(path)
        if latest is None:
            raise CheckpointError(f"run directory {path} has no {LATEST}")
        return latest
    return path
