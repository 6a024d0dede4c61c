"""
Encoder-decoder transformer with optional gated shortcut connections.

Post-layer-norm arrangement: every sub-layer output is dropped out, added to
its input and normalized. Layers are numbered from 1; H_0 is the embedding
output.
"""
import logging
from typing import Dict, Optional, Tuple

import numpy as np

from app.core.exceptions import DataError
from app.core.rng import Rng
from app.core.tensor import Tensor, concat, cross_entropy, dropout, embedding
from app.models.attention import AttentionMask, AttentionParams, multi_head_attention, split_heads
from app.models.layers import FeedForward, LayerNormParams, Module
from app.models.shortcuts import GateParams, gated_keys_values, shortcut_source
from app.models.state import Batch, DecoderCache, GateRecorder, LayerState
from app.schemas.model import ModelConfig, ShortcutVariant

logger = logging.getLogger(__name__)


def positional_encoding(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Sinusoids: sin on even feature indices, cos on odd ones."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -(np.arange(0, d_model, 2, dtype=np.float64) / d_model))
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table.astype(dtype)


class _Forward:
    """Per-call context: dropout generator (training only) and gate recorder."""

    def __init__(self, rate: float, rng: Optional[Rng], recorder: Optional[GateRecorder]):
        self.rate = rate
        self.rng = rng
        self.recorder = recorder

    @property
    def training(self) -> bool:
        return self.rng is not None

    def drop(self, x: Tensor, site: str) -> Tensor:
        if self.rng is None:
            return x
        return dropout(x, self.rate, self.rng.split(site), training=True)


def _plain_keys_values(h_t: Tensor, attn: AttentionParams) -> Tuple[Tensor, Tensor]:
    return split_heads(h_t @ attn.w_k, attn.head_count), split_heads(h_t @ attn.w_v, attn.head_count)


def _make_gates(config: ModelConfig, rng: Rng, fused: bool) -> GateParams:
    return GateParams(
        config.d_model,
        rng,
        config.np_dtype,
        projections=not fused,
        biases=not config.gateless_shortcuts,
        bias_init=config.gate_bias_init,
    )


class EncoderLayer(Module):
    def __init__(self, config: ModelConfig, index: int, rng: Rng):
        dtype = config.np_dtype
        shortcuts = config.shortcuts_in("encoder")
        fused = shortcuts and config.variant.fused
        self.self_attn = AttentionParams(config.d_model, config.head_count, rng.split("self_attn"), dtype, fused)
        self.self_gates = _make_gates(config, rng.split("self_gates"), fused) if shortcuts else None
        self.ln_attn = LayerNormParams(config.d_model, dtype)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng.split("ffn"), dtype)
        self.ln_ffn = LayerNormParams(config.d_model, dtype)
        self._index = index
        self._variant = config.variant

    @property
    def index(self) -> int:
        return self._index

    def __call__(self, h_prev: Tensor, states: LayerState, mask: AttentionMask, ctx: _Forward) -> Tensor:
        if self.self_gates is not None:
            source = shortcut_source(self._variant, self._index, states)
            kv = gated_keys_values(
                h_prev, source, self.self_attn, self.self_gates, self._index,
                ctx.recorder, "encoder", "self", states.keep,
            )
            attended = multi_head_attention(h_prev, h_prev, self.self_attn, mask, kv_override=kv)
        else:
            attended = multi_head_attention(h_prev, h_prev, self.self_attn, mask)
        site = f"enc.{self._index}"
        h = self.ln_attn(h_prev + ctx.drop(attended, f"{site}.attn"))
        return self.ln_ffn(h + ctx.drop(self.ffn(h), f"{site}.ffn"))


class DecoderLayer(Module):
    def __init__(self, config: ModelConfig, index: int, rng: Rng):
        dtype = config.np_dtype
        shortcuts = config.shortcuts_in("decoder")
        fused = shortcuts and config.variant.fused
        self.self_attn = AttentionParams(config.d_model, config.head_count, rng.split("self_attn"), dtype, fused)
        self.self_gates = _make_gates(config, rng.split("self_gates"), fused) if shortcuts else None
        self.ln_self = LayerNormParams(config.d_model, dtype)
        self.cross_attn = AttentionParams(config.d_model, config.head_count, rng.split("cross_attn"), dtype)
        self.cross_gates = _make_gates(config, rng.split("cross_gates"), False) if config.cross_shortcuts() else None
        self.ln_cross = LayerNormParams(config.d_model, dtype)
        self.ffn = FeedForward(config.d_model, config.d_ff, rng.split("ffn"), dtype)
        self.ln_ffn = LayerNormParams(config.d_model, dtype)
        self._index = index
        self._variant = config.variant

    @property
    def index(self) -> int:
        return self._index

    def self_keys_values(self, h_prev: Tensor, states: LayerState, ctx: _Forward) -> Tuple[Tensor, Tensor]:
        if self.self_gates is None:
            return _plain_keys_values(h_prev, self.self_attn)
        source = shortcut_source(self._variant, self._index, states)
        return gated_keys_values(
            h_prev, source, self.self_attn, self.self_gates, self._index,
            ctx.recorder, "decoder", "self", states.keep,
        )

    def cross_keys_values(self, encoder: LayerState, ctx: _Forward) -> Tuple[Tensor, Tensor]:
        if self.cross_gates is None:
            return _plain_keys_values(encoder.final, self.cross_attn)
        source = shortcut_source(self._variant, self._index, encoder, kind="cross", encoder_states=encoder)
        return gated_keys_values(
            encoder.final, source, self.cross_attn, self.cross_gates, self._index,
            ctx.recorder, "decoder", "cross", encoder.keep,
        )

    def __call__(
        self,
        h_prev: Tensor,
        self_kv: Tuple[Tensor, Tensor],
        self_mask: Optional[AttentionMask],
        cross_kv: Tuple[Tensor, Tensor],
        cross_mask: AttentionMask,
        ctx: _Forward,
    ) -> Tensor:
        site = f"dec.{self._index}"
        attended = multi_head_attention(h_prev, h_prev, self.self_attn, self_mask, kv_override=self_kv)
        h = self.ln_self(h_prev + ctx.drop(attended, f"{site}.self"))
        attended = multi_head_attention(h, h, self.cross_attn, cross_mask, kv_override=cross_kv)
        h = self.ln_cross(h + ctx.drop(attended, f"{site}.cross"))
        return self.ln_ffn(h + ctx.drop(self.ffn(h), f"{site}.ffn"))


class Transformer(Module):
    """
    Shared-vocabulary encoder-decoder.

    With `tie_embeddings` one table serves the encoder input, the decoder input
    and (transposed) the pre-softmax projection. Otherwise the decoder gets its
    own input table and output projection.
    """

    def __init__(self, config: ModelConfig, rng: Optional[Rng] = None):
        self.config = config
        rng = rng or Rng(config.seed)
        dtype = config.np_dtype
        d, vocab = config.d_model, config.vocab_size
        self.embedding = Tensor(rng.split("embedding").normal(d ** -0.5, (vocab, d), dtype), requires_grad=True)
        if config.tie_embeddings:
            self._target_table = self.embedding
            self._projection = None
        else:
            self.target_embedding = Tensor(
                rng.split("target_embedding").normal(d ** -0.5, (vocab, d), dtype), requires_grad=True
            )
            self.output_projection = Tensor(
                rng.split("output_projection").normal(d ** -0.5, (d, vocab), dtype), requires_grad=True
            )
            self._target_table = self.target_embedding
            self._projection = self.output_projection
        self.encoder = [EncoderLayer(config, i + 1, rng.split(f"encoder.{i + 1}")) for i in range(config.n_layers)]
        self.decoder = [DecoderLayer(config, i + 1, rng.split(f"decoder.{i + 1}")) for i in range(config.n_layers)]
        self._positions = positional_encoding(config.max_len + 1, d, dtype)
        self.recorder: Optional[GateRecorder] = None
        logger.info(
            f"Built transformer: variant={config.variant.value}, layers={config.n_layers}, "
            f"d_model={d}, parameters={self.num_parameters()}"
        )

    @property
    def output_weight(self) -> Tensor:
        """Pre-softmax matrix, d_model x vocab."""
        return self._projection if self._projection is not None else self.embedding.T

    def _context(self, rng: Optional[Rng]) -> _Forward:
        rate = self.config.dropout_rate
        return _Forward(rate, rng if rate > 0 else None, self.recorder)

    def embed(self, tokens: np.ndarray, side: str = "encoder", offset: int = 0, rng: Optional[Rng] = None):
        """
        H_0 = table[tokens] * sqrt(d_model) + positions; dropout when `rng` is given.
        Returns (H_0, shortcut source E, raw table rows).
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise DataError(f"token ids must be a b x t array, got shape {tokens.shape}")
        if offset + tokens.shape[1] > self.config.max_len + 1:
            raise DataError(f"sequence of length {offset + tokens.shape[1]} exceeds max_len={self.config.max_len}")
        table = self.embedding if side == "encoder" else self._target_table
        rows = embedding(table, tokens)
        scaled = rows * float(np.sqrt(self.config.d_model))
        if self.config.positional_encoding:
            positions = Tensor(self._positions[offset:offset + tokens.shape[1]], dtype=scaled.dtype)
            h0 = scaled + positions
        else:
            h0 = scaled
        ctx = self._context(rng)
        h0 = ctx.drop(h0, f"{side}.embed")
        source = scaled if self.config.shortcut_pre_positional else h0
        return h0, source, rows

    def encode(self, src: np.ndarray, rng: Optional[Rng] = None) -> LayerState:
        src = np.asarray(src)
        keep = src != 0
        if src.size == 0 or not keep.any(axis=1).all():
            raise DataError("empty source sentence in batch")
        h0, source, rows = self.embed(src, "encoder", rng=rng)
        states = LayerState(src, keep, source, rows, [h0])
        mask = AttentionMask.padding(keep, src.shape[1])
        ctx = self._context(rng)
        for layer in self.encoder:
            states.hidden.append(layer(states.final, states, mask, ctx))
        return states

    def decode(
        self,
        tgt_prefix: np.ndarray,
        encoder_states: LayerState,
        rng: Optional[Rng] = None,
        return_states: bool = False,
    ):
        """Teacher-forced logits b x t x vocab for every prefix position."""
        tgt_prefix = np.asarray(tgt_prefix)
        if tgt_prefix.ndim != 2 or tgt_prefix.shape[1] == 0:
            raise DataError(f"target prefix must be a non-empty b x t array, got shape {tgt_prefix.shape}")
        if tgt_prefix.shape[1] > self.config.max_len:
            raise DataError(f"target prefix of length {tgt_prefix.shape[1]} exceeds max_len={self.config.max_len}")
        keep = tgt_prefix != 0
        h0, source, rows = self.embed(tgt_prefix, "decoder", rng=rng)
        states = LayerState(tgt_prefix, keep, source, rows, [h0])
        b, t = tgt_prefix.shape
        self_mask = AttentionMask.causal(t, batch=b) & AttentionMask.padding(keep, t)
        cross_mask = AttentionMask.padding(encoder_states.keep, t)
        ctx = self._context(rng)
        for layer in self.decoder:
            self_kv = layer.self_keys_values(states.final, states, ctx)
            cross_kv = layer.cross_keys_values(encoder_states, ctx)
            states.hidden.append(layer(states.final, self_kv, self_mask, cross_kv, cross_mask, ctx))
        logits = states.final @ self.output_weight
        return (logits, states) if return_states else logits

    def forward(self, src: np.ndarray, tgt_in: np.ndarray, rng: Optional[Rng] = None) -> Tensor:
        return self.decode(tgt_in, self.encode(src, rng=rng), rng=rng)

    def forward_loss(self, batch: Batch, rng: Optional[Rng] = None) -> Tensor:
        """Mean cross-entropy over non-padding target positions."""
        logits = self.forward(batch.src, batch.tgt_in, rng=rng)
        return cross_entropy(logits, batch.tgt_out, batch.tgt_keep, smoothing=self.config.label_smoothing)

    def start_decoding(self, encoder_states: LayerState) -> DecoderCache:
        """Cache with the decoder-to-encoder K'/V' of every layer filled in."""
        cache = DecoderCache(np.asarray(encoder_states.keep, dtype=bool))
        ctx = self._context(None)
        for layer in self.decoder:
            cache.entries[(layer.index, "cross")] = layer.cross_keys_values(encoder_states, ctx)
        return cache

    def decode_step(self, tokens: np.ndarray, cache: DecoderCache) -> Tensor:
        """
        Feed one token per row at position `cache.length` and return the next
        token logits (b x vocab). Extends the cache in place.
        """
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        if tokens.shape[0] != cache.batch_size:
            raise DataError(f"decode_step got {tokens.shape[0]} rows for a cache of {cache.batch_size}")
        if cache.length >= self.config.max_len:
            raise DataError(f"decoding past max_len={self.config.max_len}")
        h0, source, rows = self.embed(tokens, "decoder", offset=cache.length)
        keep = np.ones(tokens.shape, dtype=bool)
        states = LayerState(tokens, keep, source, rows, [h0])
        cross_mask = AttentionMask.padding(cache.source_keep, 1)
        ctx = self._context(None)
        for layer in self.decoder:
            k_new, v_new = layer.self_keys_values(states.final, states, ctx)
            key = (layer.index, "self")
            if key in cache.entries:
                k_old, v_old = cache.entries[key]
                k_new = concat([k_old, k_new], axis=2)
                v_new = concat([v_old, v_new], axis=2)
            cache.entries[key] = (k_new, v_new)
            cross_kv = cache.entries[(layer.index, "cross")]
            states.hidden.append(layer(states.final, (k_new, v_new), None, cross_kv, cross_mask, ctx))
        cache.length += 1
        logits = states.final @ self.output_weight
        return logits.reshape(tokens.shape[0], self.config.vocab_size)

    @staticmethod
    def parameter_count(config: ModelConfig) -> int:
        """Closed-form parameter count; equals `num_parameters()` of a built model."""
        d, n = config.d_model, config.n_layers
        layer_norm = 2 * d
        ffn = 2 * d * config.d_ff + config.d_ff + d

        def attention(fused: bool) -> int:
            return 2 * d * d + (2 * (2 * d) ** 2 if fused else 2 * d * d)

        def gates(fused: bool) -> int:
            projections = 0 if fused else 2 * d * d
            biases = 0 if config.gateless_shortcuts else 2 * d
            return projections + biases

        enc_shortcuts = config.shortcuts_in("encoder")
        dec_shortcuts = config.shortcuts_in("decoder")
        enc_fused = enc_shortcuts and config.variant.fused
        dec_fused = dec_shortcuts and config.variant.fused

        encoder_layer = attention(enc_fused) + ffn + 2 * layer_norm + (gates(enc_fused) if enc_shortcuts else 0)
        decoder_layer = attention(dec_fused) + attention(False) + ffn + 3 * layer_norm
        decoder_layer += gates(dec_fused) if dec_shortcuts else 0
        decoder_layer += gates(False) if config.cross_shortcuts() else 0

        tables = config.vocab_size * d * (1 if config.tie_embeddings else 3)
        return tables + n * (encoder_layer + decoder_layer)

    def gate_params(self) -> Dict[str, GateParams]:
        """Gate parameter sets keyed `<side>.<kind>.l<layer>`."""
        found: Dict[str, GateParams] = {}
        for layer in self.encoder:
            if layer.self_gates is not None:
                found[f"encoder.self.l{layer.index}"] = layer.self_gates
        for layer in self.decoder:
            if layer.self_gates is not None:
                found[f"decoder.self.l{layer.index}"] = layer.self_gates
            if layer.cross_gates is not None:
                found[f"decoder.cross.l{layer.index}"] = layer.cross_gates
        return found

    def pin_gates(self, value: float) -> None:
        for params in self.gate_params().values():
            params.pin_bias(value)

    @property
    def variant(self) -> ShortcutVariant:
        return self.config.variant

