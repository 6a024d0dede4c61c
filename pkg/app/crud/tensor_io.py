"""
Tensor blob format: each record is one JSON header line
`{"name": ..., "shape": [...], "dtype": "float32"}` followed by the raw
little-endian bytes of the array.
"""
import json
import logging
from typing import BinaryIO, Dict, Iterator, Mapping, Tuple

import numpy as np

from app.core.exceptions import CheckpointError

logger = logging.getLogger(__name__)

SUPPORTED_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "bool": "|b1"}


def write_tensor(fh: BinaryIO, name: str, array: np.ndarray) -> int:
    array = np.asarray(array)
    dtype_name = array.dtype.name
    if dtype_name not in SUPPORTED_DTYPES:
        raise CheckpointError(f"cannot serialize tensor {name} of dtype {dtype_name}")
    header = {"name": name, "shape": list(array.shape), "dtype": dtype_name}
    fh.write((json.dumps(header) + "\n").encode("utf-8"))
    payload = np.ascontiguousarray(array, dtype=SUPPORTED_DTYPES[dtype_name]).tobytes()
    fh.write(payload)
    return len(payload)


def read_tensor(fh: BinaryIO) -> Tuple[str, np.ndarray]:
    line = fh.readline()
    if not line:
        raise EOFError
    try:
        header = json.loads(line.decode("utf-8"))
        name, shape, dtype_name = header["name"], tuple(header["shape"]), header["dtype"]
        dtype = np.dtype(SUPPORTED_DTYPES[dtype_name])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt tensor header: {exc}") from None
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise CheckpointError(f"truncated tensor {name}: expected {count * dtype.itemsize} bytes, got {len(payload)}")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return name, array


def iter_tensors(fh: BinaryIO) -> Iterator[Tuple[str, np.ndarray]]:
    while True:
        try:
            yield read_tensor(fh)
        except EOFError:
            return


def write_tensors(fh: BinaryIO, arrays: Mapping[str, np.ndarray]) -> int:
    return sum(write_tensor(fh, name, array) for name, array in arrays.items())


def read_tensors(fh: BinaryIO) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for name, array in iter_tensors(fh):
        if name in arrays:
            raise CheckpointError(f"duplicate tensor {name} in blob")
        arrays[name] = array
    return arrays
