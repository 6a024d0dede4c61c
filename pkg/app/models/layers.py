import logging
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from app.core.exceptions import CheckpointError
from app.core.rng import Rng
from app.core.tensor import Tensor, layer_norm, relu

logger = logging.getLogger(__name__)


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, dtype, shape: Optional[Tuple[int, ...]] = None) -> Tensor:
    """Scaled uniform (fan-average) initializer used for every weight matrix."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape or (fan_in, fan_out), dtype=dtype), requires_grad=True)


def zeros(extent: int, dtype, value: float = 0.0) -> Tensor:
    return Tensor(np.full(extent, value, dtype=dtype), requires_grad=True)


class Module:
    """
    Container of named parameters and sub-modules.

    Parameters are trainable `Tensor` attributes; sub-modules may also sit in
    lists or dicts. A tensor reachable under several names (tied embeddings)
    is reported once, under the first name found.
    """

    def named_parameters(self, prefix: str = "", _seen: Optional[set] = None) -> Iterator[Tuple[str, Tensor]]:
        seen = set() if _seen is None else _seen
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.", seen)
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{index}.", seen)
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{key}.", seen)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"parameter set mismatch: missing={missing[:5]}, unexpected={unexpected[:5]}")
        for name, param in params.items():
            array = np.asarray(arrays[name])
            if array.shape != param.shape:
                raise CheckpointError(f"parameter {name}: shape {array.shape} does not match model {param.shape}")
            param.data = array.astype(param.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, dtype, bias: bool = True):
        self.weight = xavier_uniform(rng, d_in, d_out, dtype)
        self.bias = zeros(d_out, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNormParams(Module):
    def __init__(self, d_model: int, dtype, eps: float = 1e-6):
        self.gamma = zeros(d_model, dtype, value=1.0)
        self.beta = zeros(d_model, dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, eps=self._eps)


class FeedForward(Module):
    """Position-wise ReLU network d_model -> d_ff -> d_model."""

    def __init__(self, d_model: int, d_ff: int, rng: Rng, dtype):
        self.inner = Linear(d_model, d_ff, rng.split("inner"), dtype)
        self.outer = Linear(d_ff, d_model, rng.split("outer"), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(relu(self.inner(x)))
