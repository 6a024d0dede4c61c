import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from app.core.exceptions import ConfigError
from app.schemas.run import RunConfig

load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVEL = os.getenv("LEXSHORT_LOG_LEVEL", "INFO")
RUNS_DIR = os.getenv("LEXSHORT_RUNS_DIR", "runs")
SERVED_CHECKPOINT = os.getenv("LEXSHORT_CHECKPOINT")
SERVED_VOCAB = os.getenv("LEXSHORT_VOCAB")

RESOLVED_CONFIG = "config.json"


def parse_override(item: str):
    """`a.b.c=value` -> (["a", "b", "c"], value); value parsed as JSON, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(payload: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        path, value = parse_override(item)
        node = payload
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
            node = child
        node[path[-1]] = value
    return payload


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """JSON file (optional) + dotted overrides, validated; unknown keys are rejected."""
    payload: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    payload = apply_overrides(payload, overrides)
    try:
        return RunConfig(**payload)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def write_resolved_config(config: RunConfig, run_dir: Union[str, Path]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    target = run_dir / RESOLVED_CONFIG
    payload = config.model_dump(mode="json")
    payload["train"]["warmup_steps"] = config.warmup_steps
    target.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(f"Resolved config written to {target}")
    return target
