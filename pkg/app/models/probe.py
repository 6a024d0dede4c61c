from typing import Optional

import numpy as np

from app.core.rng import Rng
from app.core.tensor import Tensor, dropout, relu
from app.models.layers import Linear, Module


class ProbeClassifier(Module):
    """Feed-forward lexical probe: d -> hidden (ReLU, dropout) -> vocabulary logits."""

    def __init__(self, d_in: int, hidden_units: int, n_classes: int, rng: Rng, dropout_rate: float = 0.5, dtype=np.float32):
        self.hidden = Linear(d_in, hidden_units, rng.split("hidden"), dtype)
        self.output = Linear(hidden_units, n_classes, rng.split("output"), dtype)
        self._rate = dropout_rate

    def __call__(self, x: Tensor, rng: Optional[Rng] = None) -> Tensor:
        h = relu(self.hidden(x))
        h = dropout(h, self._rate, rng, training=rng is not None)
        return self.output(h)

    def predict(self, states: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        dtype = self.hidden.weight.dtype
        out = []
        for start in range(0, states.shape[0], batch_size):
            chunk = Tensor(states[start:start + batch_size], dtype=dtype)
            out.append(self(chunk).numpy().argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
