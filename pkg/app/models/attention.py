"""
Multi-head scaled dot-product attention.

Projections are fused d_model x d_model matrices applied to row vectors
(`H @ W`) and sliced into heads afterwards; there are no projection biases.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from app.core.exceptions import DataError, ShapeError
from app.core.rng import Rng
from app.core.tensor import MASK_VALUE, Tensor, softmax
from app.models.layers import Module, xavier_uniform

logger = logging.getLogger(__name__)


class MaskKind(str, Enum):
    PADDING = "padding"
    CAUSAL = "causal"
    BOTH = "both"


@dataclass
class AttentionMask:
    """Boolean keep matrix in query x key layout, shaped b x t_q x t_k."""
    kind: MaskKind
    keep: np.ndarray

    @classmethod
    def padding(cls, key_keep: np.ndarray, t_q: int) -> "AttentionMask":
        key_keep = np.asarray(key_keep, dtype=bool)
        keep = np.broadcast_to(key_keep[:, None, :], (key_keep.shape[0], t_q, key_keep.shape[1]))
        return cls(MaskKind.PADDING, keep)

    @classmethod
    def causal(cls, t_q: int, t_k: Optional[int] = None, batch: int = 1, offset: int = 0) -> "AttentionMask":
        """Query i (absolute position offset + i) may see keys 0..offset + i."""
        t_k = t_q + offset if t_k is None else t_k
        keep = np.arange(t_k)[None, :] <= (np.arange(t_q)[:, None] + offset)
        return cls(MaskKind.CAUSAL, np.broadcast_to(keep, (batch, t_q, t_k)))

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(MaskKind.BOTH, np.logical_and(self.keep, other.keep))

    def additive(self, dtype) -> np.ndarray:
        """b x 1 x t_q x t_k array of 0 / MASK_VALUE, broadcast over heads."""
        return np.where(self.keep, 0.0, MASK_VALUE).astype(dtype)[:, None, :, :]


class AttentionParams(Module):
    """
    W^Q, W^K, W^V, W^O of one attention sub-layer.

    With `fused_kv` the key and value projections map [E; H] (2*d_model) to the
    shortcut and hidden streams at once, so W^K and W^V are 2d x 2d.
    """

    def __init__(self, d_model: int, head_count: int, rng: Rng, dtype, fused_kv: bool = False):
        if d_model % head_count:
            raise ShapeError(f"d_model={d_model} not divisible by head_count={head_count}")
        kv_width = 2 * d_model if fused_kv else d_model
        self.w_q = xavier_uniform(rng.split("q"), d_model, d_model, dtype)
        self.w_k = xavier_uniform(rng.split("k"), kv_width, kv_width, dtype)
        self.w_v = xavier_uniform(rng.split("v"), kv_width, kv_width, dtype)
        self.w_o = xavier_uniform(rng.split("o"), d_model, d_model, dtype)
        self._d_model = d_model
        self._heads = head_count
        self._fused_kv = fused_kv

    @property
    def d_model(self) -> int:
        return self._d_model

    @property
    def head_count(self) -> int:
        return self._heads

    @property
    def d_k(self) -> int:
        return self._d_model // self._heads

    @property
    def fused_kv(self) -> bool:
        return self._fused_kv


def split_heads(x: Tensor, head_count: int) -> Tensor:
    """b x t x d -> b x heads x t x d_k"""
    b, t, d = x.shape
    return x.reshape(b, t, head_count, d // head_count).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    """b x heads x t x d_k -> b x t x d"""
    b, h, t, d_k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d_k)


def _check_model_dim(name: str, x: Tensor, d_model: int) -> None:
    if x.ndim != 3 or x.shape[-1] != d_model:
        raise ShapeError(f"{name} must be b x t x {d_model}", x.shape)


def project_qkv(h_s: Tensor, h_t: Tensor, params: AttentionParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Q from h_s; K and V from h_t; all reshaped per head."""
    _check_model_dim("h_s", h_s, params.d_model)
    _check_model_dim("h_t", h_t, params.d_model)
    if params.fused_kv:
        raise ShapeError("fused key/value projections take [E; H]; use fusion_project")
    heads = params.head_count
    q = split_heads(h_s @ params.w_q, heads)
    k = split_heads(h_t @ params.w_k, heads)
    v = split_heads(h_t @ params.w_v, heads)
    return q, k, v


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Optional[AttentionMask] = None, return_weights: bool = False
):
    """softmax(Q K^T / sqrt(d_k) + mask) V over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("queries and keys differ in d_k", q.shape, k.shape)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values differ in length", k.shape, v.shape)
    scores = (q @ k.T) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        if not mask.keep.any(axis=-1).all():
            raise DataError("attention row with every key masked")
        scores = scores + Tensor(mask.additive(scores.dtype), dtype=scores.dtype)
    weights = softmax(scores, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def multi_head_attention(
    h_s: Tensor,
    h_t: Tensor,
    params: AttentionParams,
    mask: Optional[AttentionMask] = None,
    kv_override: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tensor:
    """
    Vanilla multi-head attention, or attention over replacement per-head
    keys/values (`kv_override`, each b x heads x t_k x d_k) when given.
    """
    if kv_override is None:
        q, k, v = project_qkv(h_s, h_t, params)
    else:
        _check_model_dim("h_s", h_s, params.d_model)
        k, v = kv_override
        expected = (h_s.shape[0], params.head_count, k.shape[2], params.d_k)
        if k.shape != expected or v.shape != expected:
            raise ShapeError("kv_override must be b x heads x t_k x d_k", k.shape, v.shape, expected)
        q = split_heads(h_s @ params.w_q, params.head_count)
    out = scaled_dot_attention(q, k, v, mask)
    return merge_heads(out) @ params.w_o
