"""
Dense tensors with reverse-mode automatic differentiation.

Array storage and kernels are numpy; this module adds the computation
record (`Tape`) and the gradient rules. Operations are recorded only while a
tape is active on the current thread, so inference code simply runs without
one.

    with Tape() as tape:
        loss = model.forward_loss(batch)
    tape.backward(loss)
"""
import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import DataError, NumericalError, ShapeError, TapeError

logger = logging.getLogger(__name__)

# Additive value for masked attention logits; finite so saturated softmax
# gradients stay defined.
MASK_VALUE = -1e9

CHECK_FINITE = True

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def get_default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Switch the default floating dtype on this thread (float64 for gradient checks)."""
    previous = get_default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """n-dimensional value, optionally tracked for gradients."""

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        array = np.asarray(data, dtype=dtype)
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError("tensor extents must be positive", array.shape)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        tape = self._tape or active_tape()
        if tape is None:
            raise TapeError("backward called on a tensor that was not produced on a tape")
        tape.backward(self)

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype)

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Tape:
    """
    Ordered record of executed operations.

    Records are appended in execution order, so every operation follows the
    producers of its inputs; `backward` walks them once in reverse.
    """

    def __init__(self):
        self.records: List[Tuple["Function", Tuple[Tensor, ...], Tensor]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, fn: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape after backward; call reset() first")
        output._tape = self
        self.records.append((fn, inputs, output))

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward already ran on this tape; reset() it before another pass")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        pending = {id(loss): loss}
        for fn, inputs, output in reversed(self.records):
            grad = grads.pop(id(output), None)
            if grad is None:
                continue
            pending.pop(id(output), None)
            output.grad = grad if output.grad is None else output.grad + grad
            for tensor, input_grad in zip(inputs, fn.backward(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                input_grad = input_grad.astype(tensor.dtype, copy=False)
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + input_grad
                else:
                    grads[key] = input_grad
                    pending[key] = tensor

        for key, grad in grads.items():
            tensor = pending[key]
            if tensor.requires_grad:
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad

        # Leaves the loss never reached get a zero gradient.
        produced = {id(output) for _, _, output in self.records}
        for _, inputs, _ in self.records:
            for tensor in inputs:
                if tensor.requires_grad and tensor.grad is None and id(tensor) not in produced:
                    tensor.grad = np.zeros_like(tensor.data)


class Function:
    """
    Base class of differentiable operations.

    `forward` receives the input arrays and keeps whatever `backward` needs on
    `self`; `backward` returns one gradient (or None) per input.
    """

    name = "op"

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls()
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        if CHECK_FINITE and not np.all(np.isfinite(out_data)):
            raise NumericalError(f"non-finite values produced by {fn.name}")
        tape = active_tape()
        requires_grad = tape is not None and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            tape.record(fn, tensors, out)
        return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name} operands do not broadcast", a.shape, b.shape) from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs operands of rank >= 2", a.shape, b.shape)
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul inner extents differ", a.shape, b.shape)
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError("matmul batch extents do not broadcast", a.shape, b.shape) from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        grad_a = grad @ np.swapaxes(self.b, -1, -2)
        grad_b = np.swapaxes(self.a, -1, -2) @ grad
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        out = a.mean(axis=axis, keepdims=keepdims)
        self.count = a.size // max(np.asarray(out).size, 1)
        return np.asarray(out)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape to {tuple(shape)}", a.shape) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis=-1):
        try:
            shifted = x - x.max(axis=axis, keepdims=True)
        except (ValueError, IndexError):
            raise ShapeError(f"softmax axis {axis} out of range", x.shape) from None
        exp = np.exp(shifted)
        self.y, self.axis = exp / exp.sum(axis=axis, keepdims=True), axis
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x, axis=-1):
        shifted = x - x.max(axis=axis, keepdims=True)
        self.y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.axis = axis
        return self.y

    def backward(self, grad):
        return (grad - np.exp(self.y) * grad.sum(axis=self.axis, keepdims=True),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        exp = np.exp(x[~positive])
        out[~positive] = exp / (1.0 + exp)
        self.y = out
        return out

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gamma, beta, eps=1e-6):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError("layer_norm scale/shift must match the feature extent", x.shape, gamma.shape)
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        self.rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        self.xhat = centered * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        xhat, rstd = self.xhat, self.rstd
        dxhat = grad * self.gamma
        grad_x = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        return grad_x, (grad * xhat).sum(axis=lead), grad.sum(axis=lead)


class Gather(Function):
    name = "embedding"

    def forward(self, table, ids):
        self.table_shape, self.ids = table.shape, ids
        return table[ids]

    def backward(self, grad):
        grad_table = np.zeros(self.table_shape, dtype=grad.dtype)
        np.add.at(grad_table, self.ids, grad)
        return (grad_table,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=-1):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError("concat operands differ outside the joined axis", *(a.shape for a in arrays)) from None
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Slice(Function):
    name = "slice"

    def forward(self, x, start, stop, axis=-1):
        self.shape = x.shape
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        self.index = tuple(index)
        return x[self.index]

    def backward(self, grad):
        grad_x = np.zeros(self.shape, dtype=grad.dtype)
        grad_x[self.index] = grad
        return (grad_x,)


class CrossEntropy(Function):
    name = "cross_entropy"

    def forward(self, logits, targets, keep, smoothing=0.0):
        vocab = logits.shape[-1]
        flat = logits.reshape(-1, vocab)
        targets = targets.reshape(-1)
        keep = keep.reshape(-1).astype(logits.dtype)
        shifted = flat - flat.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        rows = np.arange(flat.shape[0])
        per_token = -logp[rows, targets]
        if smoothing:
            per_token = (1.0 - smoothing) * per_token - smoothing * logp.mean(axis=-1)
        self.count = keep.sum()
        self.logp, self.targets, self.keep = logp, targets, keep
        self.smoothing, self.shape = smoothing, logits.shape
        return np.asarray((per_token * keep).sum() / self.count, dtype=logits.dtype)

    def backward(self, grad):
        vocab = self.logp.shape[-1]
        target_dist = np.full(self.logp.shape, self.smoothing / vocab, dtype=self.logp.dtype)
        target_dist[np.arange(self.logp.shape[0]), self.targets] += 1.0 - self.smoothing
        grad_logits = (np.exp(self.logp) - target_dist) * (self.keep / self.count)[:, None] * grad
        return (grad_logits.reshape(self.shape),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")
    return Gather.apply(table, ids=ids)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(x: Tensor, sections: Union[int, Sequence[int]], axis: int = -1) -> List[Tensor]:
    """Split along `axis` into `sections` equal parts, or parts of the given sizes."""
    extent = x.shape[axis]
    if isinstance(sections, int):
        if extent % sections:
            raise ShapeError(f"cannot split extent {extent} into {sections} equal parts", x.shape)
        sizes = [extent // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != extent:
            raise ShapeError(f"split sizes {sizes} do not add up to extent {extent}", x.shape)
    parts, start = [], 0
    for size in sizes:
        parts.append(Slice.apply(x, start=start, stop=start + size, axis=axis))
        start += size
    return parts


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout: identity at inference, `x * mask / (1 - rate)` in training."""
    if not training or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * Tensor(keep / (1.0 - rate), dtype=x.dtype)


def cross_entropy(logits: Tensor, targets: np.ndarray, keep: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean token cross-entropy over positions where `keep` is true."""
    keep = np.asarray(keep, dtype=bool)
    if not keep.any():
        raise DataError("cross-entropy over a batch without any non-padding target")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("targets must match the logits without the vocabulary axis", targets.shape, logits.shape)
    return CrossEntropy.apply(logits, targets=np.asarray(targets), keep=keep, smoothing=smoothing)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """
    Compare the recorded gradient of scalar `f(*inputs)` against central differences.

    Returns max over all input scalars of
    |analytic - numeric| / max(1, |analytic|, |numeric|). Inputs must be float64.
    """
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise NumericalError(f"grad_check needs float64 inputs, got {tensor.dtype}")
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.requires_grad = True
        tensor.grad = None

    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = f(*inputs).item()
            flat[i] = original - eps
            minus = f(*inputs).item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            error = abs(grad_flat[i] - numeric) / max(1.0, abs(grad_flat[i]), abs(numeric))
            worst = max(worst, error)
    logger.debug(f"grad_check over {sum(t.size for t in inputs)} scalars: max relative error {worst:.3e}")
    return worst
