"""
Gated shortcut connections into attention keys and values.

A shortcut-equipped layer l computes, next to its usual K_l = H_{l-1} W^K, a
second key array K^SC_l = E W^{K^SC}_l from the shortcut source E, mixes the
two with an elementwise sigmoid gate and attends over the result:

    r  = sigmoid(K^SC + K + b^K)
    K' = r * K^SC + (1 - r) * K

Values are handled identically. Gating happens on whole d_model-wide arrays;
the per-head split comes afterwards.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from app.core.exceptions import ConfigError, DataError, ShapeError
from app.core.rng import Rng
from app.core.tensor import Function, Tensor, concat, sigmoid, split
from app.models.attention import AttentionParams, split_heads
from app.models.layers import Module, xavier_uniform, zeros
from app.models.state import GateRecord, GateRecorder, LayerState
from app.schemas.model import ShortcutVariant

logger = logging.getLogger(__name__)


class GateParams(Module):
    """
    Shortcut projections and gate biases of one layer.

    Under feature-fusion the shortcut projections live inside the fused
    W^K / W^V of the attention block, so only the biases remain here.
    Gate-less shortcuts have projections but no biases.
    """

    def __init__(
        self,
        d_model: int,
        rng: Rng,
        dtype,
        projections: bool = True,
        biases: bool = True,
        bias_init: float = 0.0,
    ):
        self.w_k_sc = xavier_uniform(rng.split("k_sc"), d_model, d_model, dtype) if projections else None
        self.w_v_sc = xavier_uniform(rng.split("v_sc"), d_model, d_model, dtype) if projections else None
        self.b_k = zeros(d_model, dtype, value=bias_init) if biases else None
        self.b_v = zeros(d_model, dtype, value=bias_init) if biases else None

    @property
    def gated(self) -> bool:
        return self.b_k is not None

    def pin_bias(self, value: float) -> None:
        """Force both gates towards one stream (r -> 1 for large value, r -> 0 for very negative)."""
        for bias in (self.b_k, self.b_v):
            if bias is not None:
                bias.data[...] = value


class GatedMix(Function):
    """r * a + (1 - r) * b, clipped to the elementwise [min(a, b), max(a, b)] hull."""

    name = "gated_mix"

    def forward(self, r, a, b):
        if not (r.shape == a.shape == b.shape):
            raise ShapeError("fuse operands must share one shape", r.shape, a.shape, b.shape)
        self.r, self.a, self.b = r, a, b
        mixed = r * a + (1.0 - r) * b
        return np.clip(mixed, np.minimum(a, b), np.maximum(a, b))

    def backward(self, grad):
        r = self.r
        return grad * (self.a - self.b), grad * r, grad * (1.0 - r)


def project_shortcut(
    e: Tensor, layer: int, gates: Optional[GateParams], head_count: Optional[int] = None
) -> Tuple[Tensor, Tensor]:
    """K^SC_l = E W^{K^SC}_l and V^SC_l = E W^{V^SC}_l, split per head if `head_count` is given."""
    if gates is None:
        raise ConfigError(f"layer {layer} has no shortcut gate parameters")
    if gates.w_k_sc is None:
        raise ConfigError(f"layer {layer} uses fused projections; use fusion_project")
    if e.ndim != 3 or e.shape[-1] != gates.w_k_sc.shape[0]:
        raise ShapeError(f"shortcut source of layer {layer} must be b x t x {gates.w_k_sc.shape[0]}", e.shape)
    k_sc = e @ gates.w_k_sc
    v_sc = e @ gates.w_v_sc
    if head_count:
        return split_heads(k_sc, head_count), split_heads(v_sc, head_count)
    return k_sc, v_sc


def gate(x_sc: Tensor, x_h: Tensor, bias: Tensor) -> Tensor:
    if x_sc.shape != x_h.shape:
        raise ShapeError("gate inputs differ in shape", x_sc.shape, x_h.shape)
    return sigmoid(x_sc + x_h + bias)


def fuse(r: Tensor, x_sc: Tensor, x_h: Tensor) -> Tensor:
    return GatedMix.apply(r, x_sc, x_h)


def fusion_project(e: Tensor, h_prev: Tensor, w_k: Tensor, w_v: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """
    Joint projection of [E; H_{l-1}] by 2d x 2d weights. The first half of
    each result is the shortcut stream, the second half the hidden stream.
    """
    if e.shape != h_prev.shape:
        raise ShapeError("fusion inputs differ in shape", e.shape, h_prev.shape)
    joined = concat([e, h_prev], axis=-1)
    if w_k.shape[0] != joined.shape[-1] or w_v.shape[0] != joined.shape[-1]:
        raise ShapeError("fused weights must take the concatenated width", joined.shape, w_k.shape, w_v.shape)
    k_sc, k = split(joined @ w_k, 2, axis=-1)
    v_sc, v = split(joined @ w_v, 2, axis=-1)
    return k_sc, k, v_sc, v


def shortcut_source(
    variant: ShortcutVariant,
    layer: int,
    states: LayerState,
    kind: str = "self",
    encoder_states: Optional[LayerState] = None,
) -> Tensor:
    """
    Array feeding layer `layer` (1-based) through its shortcut.

    Self-attention shortcuts read the embeddings of their own sub-network,
    or H_{l-2} for the non-lexical variant (layers 1 and 2 both read H_0).
    Decoder-to-encoder shortcuts read the source-side embeddings.
    """
    if variant is ShortcutVariant.NONE:
        raise ConfigError("the vanilla transformer has no shortcut source")
    if kind == "cross":
        if not variant.cross_attention:
            raise ConfigError(f"variant {variant.value} has no decoder-to-encoder shortcuts")
        if encoder_states is None:
            raise DataError("decoder-to-encoder shortcuts need the encoder states")
        return encoder_states.embeddings
    if not variant.self_attention:
        raise ConfigError(f"variant {variant.value} has no self-attention shortcuts")
    if variant is ShortcutVariant.NONLEXICAL:
        if layer < 1:
            raise ConfigError(f"non-lexical shortcut requested for layer {layer}; layers start at 1")
        index = max(layer - 2, 0)
        if index >= len(states.hidden):
            raise DataError(f"hidden state H_{index} not computed yet for layer {layer}")
        return states.hidden[index]
    return states.embeddings


def gated_keys_values(
    h_t: Tensor,
    source: Tensor,
    attn: AttentionParams,
    gates: GateParams,
    layer: int,
    recorder: Optional[GateRecorder] = None,
    side: str = "encoder",
    kind: str = "self",
    keep: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """Per-head K', V' of one attention block with a shortcut attached."""
    if attn.fused_kv:
        k_sc, k, v_sc, v = fusion_project(source, h_t, attn.w_k, attn.w_v)
    else:
        k_sc, v_sc = project_shortcut(source, layer, gates)
        k = h_t @ attn.w_k
        v = h_t @ attn.w_v

    if gates.gated:
        r_k = gate(k_sc, k, gates.b_k)
        r_v = gate(v_sc, v, gates.b_v)
        k_new = fuse(r_k, k_sc, k)
        v_new = fuse(r_v, v_sc, v)
        if recorder is not None:
            recorder.add(GateRecord(side, kind, layer, r_k.data.copy(), r_v.data.copy(), keep))
    else:
        k_new = k_sc + k
        v_new = v_sc + v
    return split_heads(k_new, attn.head_count), split_heads(v_new, attn.head_count)
