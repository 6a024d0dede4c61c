import hashlib
import json
from typing import Any, Mapping

import numpy as np


def stable_int(text: str) -> int:
    """
    32-bit integer derived from a string, identical across processes
    (unlike the builtin hash, which is salted per interpreter).
    """
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def config_hash(config: Mapping[str, Any]) -> str:
    """
    Short sha256 over the canonical JSON form of a config mapping.
    Key order does not matter.
    """
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def parameter_checksum(params: Mapping[str, np.ndarray]) -> str:
    """sha256 over parameter names and raw bytes, in name order."""
    digest = hashlib.sha256()
    for name in sorted(params):
        array = np.ascontiguousarray(params[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(array.dtype).encode("utf-8"))
        digest.update(array.tobytes())
    return digest.hexdigest()
