import numpy as np
import pytest

from app.core.exceptions import ConfigError, DataError, ShapeError
from app.core.rng import Rng
from app.core.tensor import Tensor, grad_check
from app.models.attention import AttentionParams
from app.models.shortcuts import (
    GateParams,
    fuse,
    fusion_project,
    gate,
    gated_keys_values,
    project_shortcut,
    shortcut_source,
)
from app.models.state import GateRecord, GateRecorder, LayerState
from app.schemas.model import ShortcutVariant


def _array(shape, name: str, scale: float = 1.0) -> Tensor:
    return Tensor(Rng(9).split(name).normal(scale, shape), dtype=np.float64)


def _states(n_hidden: int = 4) -> LayerState:
    hidden = [_array((1, 3, 4), f"h{i}") for i in range(n_hidden)]
    e = _array((1, 3, 4), "e")
    return LayerState(np.ones((1, 3), dtype=np.int64), np.ones((1, 3), dtype=bool), e, e, hidden)


def test_gated_sum_stays_between_inputs():
    """Test the fused value lies elementwise between the two streams for 10^4 random triples"""
    rng = Rng(2024)
    r = Tensor(rng.split("r").random((10_000,)), dtype=np.float64)
    a = Tensor(rng.split("a").normal(10.0, (10_000,)), dtype=np.float64)
    b = Tensor(rng.split("b").normal(10.0, (10_000,)), dtype=np.float64)
    fused = fuse(r, a, b).numpy()
    assert np.all(fused >= np.minimum(a.numpy(), b.numpy()))
    assert np.all(fused <= np.maximum(a.numpy(), b.numpy()))


def test_gate_extremes_select_one_stream():
    """Test r=1 keeps the shortcut stream and r=0 the hidden stream"""
    a, b = _array((2, 3), "a"), _array((2, 3), "b")
    np.testing.assert_array_equal(fuse(Tensor(np.ones((2, 3))), a, b).numpy(), a.numpy())
    np.testing.assert_array_equal(fuse(Tensor(np.zeros((2, 3))), a, b).numpy(), b.numpy())


def test_gate_is_sigmoid_of_sum():
    """Test r = sigmoid(K^SC + K + b)"""
    x_sc, x_h, bias = _array((2, 4), "sc"), _array((2, 4), "h"), _array((4,), "b")
    expected = 1.0 / (1.0 + np.exp(-(x_sc.numpy() + x_h.numpy() + bias.numpy())))
    np.testing.assert_allclose(gate(x_sc, x_h, bias).numpy(), expected, atol=1e-12)


def test_gate_shape_mismatch():
    """Test mismatched gate inputs raise a shape error"""
    with pytest.raises(ShapeError):
        gate(_array((2, 4), "a"), _array((2, 3), "b"), _array((4,), "c"))


def test_gated_mix_gradient():
    """Test gradient of the gated mix w.r.t. gate and both streams"""
    r = Tensor(Rng(3).random((3, 4)) * 0.8 + 0.1, dtype=np.float64)
    a, b = _array((3, 4), "a"), _array((3, 4), "b")
    weights = _array((3, 4), "w")
    assert grad_check(lambda x, y, z: (fuse(x, y, z) * weights).sum(), [r, a, b]) <= 1e-5


def test_project_shortcut_splits_heads():
    """Test shortcut projections are b x heads x t x d_k when asked per head"""
    gates = GateParams(4, Rng(1), np.float64)
    k_sc, v_sc = project_shortcut(_array((1, 3, 4), "e"), 1, gates, head_count=2)
    assert k_sc.shape == v_sc.shape == (1, 2, 3, 2)


def test_project_shortcut_without_gates():
    """Test a layer without gate parameters cannot project a shortcut"""
    with pytest.raises(ConfigError):
        project_shortcut(_array((1, 3, 4), "e"), 2, None)


def test_project_shortcut_with_fused_gates():
    """Test fused-variant gates hold no separate shortcut projections"""
    gates = GateParams(4, Rng(1), np.float64, projections=False)
    with pytest.raises(ConfigError):
        project_shortcut(_array((1, 3, 4), "e"), 1, gates)


def test_fusion_project_splits_streams():
    """Test the first half of the fused projection is the shortcut stream"""
    e, h = _array((1, 3, 4), "e"), _array((1, 3, 4), "h")
    w_k, w_v = _array((8, 8), "wk"), _array((8, 8), "wv")
    k_sc, k, v_sc, v = fusion_project(e, h, w_k, w_v)
    joined = np.concatenate([e.numpy(), h.numpy()], axis=-1)
    np.testing.assert_allclose(k_sc.numpy(), (joined @ w_k.numpy())[..., :4], atol=1e-12)
    np.testing.assert_allclose(v.numpy(), (joined @ w_v.numpy())[..., 4:], atol=1e-12)
    assert k.shape == v_sc.shape == (1, 3, 4)


def test_fusion_project_shape_errors():
    """Test fusion inputs must share one shape"""
    with pytest.raises(ShapeError):
        fusion_project(_array((1, 3, 4), "e"), _array((1, 2, 4), "h"), _array((8, 8), "k"), _array((8, 8), "v"))


def test_lexical_source_is_embeddings():
    """Test lexical shortcuts read the embedding layer at every depth"""
    states = _states()
    for layer in (1, 2, 3):
        assert shortcut_source(ShortcutVariant.LEXICAL, layer, states) is states.embeddings


def test_nonlexical_source_reads_two_layers_down():
    """Test non-lexical shortcuts read H_{max(l-2, 0)}"""
    states = _states()
    assert shortcut_source(ShortcutVariant.NONLEXICAL, 1, states) is states.hidden[0]
    assert shortcut_source(ShortcutVariant.NONLEXICAL, 2, states) is states.hidden[0]
    assert shortcut_source(ShortcutVariant.NONLEXICAL, 3, states) is states.hidden[1]


def test_nonlexical_layer_zero_is_invalid():
    """Test layers are numbered from 1"""
    with pytest.raises(ConfigError):
        shortcut_source(ShortcutVariant.NONLEXICAL, 0, _states())


def test_cross_source_needs_encoder_states():
    """Test decoder-to-encoder shortcuts read source embeddings and need them"""
    encoder = _states()
    assert shortcut_source(ShortcutVariant.DEC2ENC, 1, _states(), "cross", encoder) is encoder.embeddings
    with pytest.raises(DataError):
        shortcut_source(ShortcutVariant.DEC2ENC, 1, _states(), "cross")
    with pytest.raises(ConfigError):
        shortcut_source(ShortcutVariant.LEXICAL, 1, _states(), "cross", encoder)


def test_vanilla_has_no_shortcut_source():
    """Test the vanilla transformer has no shortcut source"""
    with pytest.raises(ConfigError):
        shortcut_source(ShortcutVariant.NONE, 1, _states())


def test_gated_keys_values_records_gates():
    """Test gate activations are recorded per side, kind and layer"""
    attn = AttentionParams(4, 2, Rng(1).split("attn"), np.float64)
    gates = GateParams(4, Rng(1).split("gates"), np.float64)
    recorder = GateRecorder()
    keep = np.array([[True, True, False]])
    k, v = gated_keys_values(_array((1, 3, 4), "h"), _array((1, 3, 4), "e"), attn, gates, 2,
                             recorder, side="decoder", kind="self", keep=keep)
    assert k.shape == v.shape == (1, 2, 3, 2)
    record = recorder.records[0]
    assert (record.side, record.kind, record.layer) == ("decoder", "self", 2)
    assert record.r_key.shape == (1, 3, 4)
    assert list(recorder.layer_means()) == ["decoder.self.l2"]


def test_pinned_gate_returns_hidden_keys():
    """Test a very negative gate bias makes K' equal the plain keys"""
    attn = AttentionParams(4, 2, Rng(1).split("attn"), np.float64)
    gates = GateParams(4, Rng(1).split("gates"), np.float64)
    gates.pin_bias(-1e4)
    h, e = _array((1, 3, 4), "h"), _array((1, 3, 4), "e")
    k, _ = gated_keys_values(h, e, attn, gates, 1)
    plain = (h.numpy() @ attn.w_k.numpy()).reshape(1, 3, 2, 2).transpose(0, 2, 1, 3)
    np.testing.assert_allclose(k.numpy(), plain, atol=1e-12)


def test_gateless_shortcut_adds_streams():
    """Test gate-less shortcuts sum the two streams"""
    attn = AttentionParams(4, 1, Rng(1).split("attn"), np.float64)
    gates = GateParams(4, Rng(1).split("gates"), np.float64, biases=False)
    h, e = _array((1, 3, 4), "h"), _array((1, 3, 4), "e")
    k, _ = gated_keys_values(h, e, attn, gates, 1)
    expected = h.numpy() @ attn.w_k.numpy() + e.numpy() @ gates.w_k_sc.numpy()
    np.testing.assert_allclose(k.numpy()[:, 0], expected, atol=1e-12)


def test_layer_means_weight_micro_batches_by_positions():
    """Test gate means pool every recorded pass instead of keeping the last one"""
    recorder = GateRecorder()
    recorder.add(GateRecord("encoder", "self", 1, np.full((1, 3, 2), 0.2), np.full((1, 3, 2), 0.2)))
    keep = np.array([[True, False]])
    recorder.add(GateRecord("encoder", "self", 1, np.array([[[0.8, 0.8], [0.0, 0.0]]]),
                            np.array([[[0.8, 0.8], [0.0, 0.0]]]), keep))
    means = recorder.layer_means()
    assert means == {"encoder.self.l1": pytest.approx((3 * 0.2 + 1 * 0.8) / 4)}
