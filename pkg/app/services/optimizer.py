import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from app.core.exceptions import ConfigError, NumericalError
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5): linear warm-up, then inverse square root decay."""
    if step < 1:
        raise ConfigError(f"learning rate schedule starts at step 1, got {step}")
    if warmup < 1:
        raise ConfigError(f"warmup must be >= 1, got {warmup}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, payload: Mapping) -> None:
        self.t = int(payload["t"])
        self.m = {name: np.array(array) for name, array in payload["m"].items()}
        self.v = {name: np.array(array) for name, array in payload["v"].items()}


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    rate: float,
) -> None:
    """
    One bias-corrected Adam update, in place. A parameter without a gradient
    is treated as having a zero gradient.
    """
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite gradient for {name} at update {state.t + 1}")
            raise NumericalError(f"non-finite gradient for parameter {name}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise NumericalError(f"gradient of {name} has shape {grad.shape}, parameter {param.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = (param.data - rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
