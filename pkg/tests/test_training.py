import csv
from itertools import islice

import numpy as np
import pytest

from app.core.exceptions import CheckpointError, ConfigError, NumericalError
from app.core.tensor import Tape, Tensor
from app.crud.checkpoint import list_checkpoints, load_checkpoint, read_latest, save_checkpoint
from app.models.state import Batch
from app.models.transformer import Transformer
from app.schemas.model import ShortcutVariant
from app.schemas.train import TrainConfig
from app.services.batching import BatchProducer, batch_sequence, pack_batches
from app.services.optimizer import AdamState, adam_step, noam_lr
from app.services.trainer import accumulate_gradients, average_checkpoints, save_average, train
from tests.conftest import tiny_config

EXAMPLES = [([4 + i % 6, 5 + (i * 3) % 6, 4 + (i * 5) % 7], [4 + i % 6, 5 + (i * 3) % 6]) for i in range(24)]


def _metrics_without_speed(path):
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row.pop("tokens_per_sec")
    return rows


def test_noam_peak_value():
    """Test the schedule at the end of warm-up equals its closed form"""
    assert noam_lr(4000, 512, 4000) == pytest.approx(512 ** -0.5 * 4000 ** -0.5, abs=1e-12)


def test_noam_rises_then_decays():
    """Test the rate increases through warm-up and decreases afterwards"""
    rates = [noam_lr(step, 512, 4000) for step in range(1, 20001)]
    assert all(a < b for a, b in zip(rates[:3999], rates[1:4000]))
    assert all(a > b for a, b in zip(rates[3999:-1], rates[4000:]))


def test_noam_scale_and_invalid_step():
    """Test the scale factor multiplies the schedule and step 0 is rejected"""
    assert noam_lr(10, 64, 5, scale=2.0) == pytest.approx(2.0 * noam_lr(10, 64, 5))
    with pytest.raises(ConfigError):
        noam_lr(0, 512, 4000)


def test_warmup_defaults_per_variant():
    """Test default warm-up lengths of each variant family"""
    config = TrainConfig()
    assert config.resolved_warmup(ShortcutVariant.NONE) == 400
    assert config.resolved_warmup(ShortcutVariant.LEXICAL, "base") == 6000
    assert config.resolved_warmup(ShortcutVariant.FUSION, "base") == 8000
    assert TrainConfig.for_variant(ShortcutVariant.FUSION, "big").resolved_warmup(ShortcutVariant.FUSION) == 16000


def test_adam_first_step_moves_by_rate():
    """Test the bias-corrected first Adam step moves each weight by about the rate"""
    param = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    adam_step({"w": param}, {"w": np.array([0.5, -3.0])}, state, 0.1)
    np.testing.assert_allclose(param.data, [0.9, -1.9], atol=1e-6)
    assert state.t == 1


def test_adam_rejects_non_finite_gradient():
    """Test a NaN gradient names the parameter"""
    param = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(NumericalError) as info:
        adam_step({"decoder.0.ffn": param}, {"decoder.0.ffn": np.array([np.nan, 0.0])}, AdamState(), 0.1)
    assert "decoder.0.ffn" in info.value.message


def test_token_weighted_accumulation_equals_joint_batch():
    """Test accumulated micro-batch gradients equal the gradient of the concatenated batch"""
    model = Transformer(tiny_config(ShortcutVariant.LEXICAL))
    first = [([4, 5, 6], [7, 8, 9, 10]), ([4], [5])]
    second = [([6, 7], [8])]
    grads, loss, tokens = accumulate_gradients(model, [Batch.from_pairs(first), Batch.from_pairs(second)], [None, None])

    joint = Batch.from_pairs(first + second)
    params = model.parameters()
    for param in params.values():
        param.grad = None
    with Tape() as tape:
        joint_loss = model.forward_loss(joint)
    tape.backward(joint_loss)
    assert tokens == joint.target_tokens == 9
    assert loss == pytest.approx(joint_loss.item(), abs=1e-10)
    for name, param in params.items():
        np.testing.assert_allclose(grads[name], param.grad, atol=1e-10)


def test_pack_batches_respects_token_budget():
    """Test padded batch sizes stay within the budget"""
    batches = pack_batches(EXAMPLES, batch_tokens=30)
    assert sum(b.size for b in batches) == len(EXAMPLES)
    for batch in batches:
        assert batch.src.size + batch.tgt_in.size <= 30


def test_batch_sequence_resumes_mid_stream():
    """Test starting at micro-step k yields what a continuous stream yields from k"""
    continuous = list(islice(batch_sequence(EXAMPLES, 30, seed=4), 12))
    resumed = list(islice(batch_sequence(EXAMPLES, 30, seed=4, start=7), 5))
    for (i, a), (j, b) in zip(continuous[7:], resumed):
        assert i == j
        np.testing.assert_array_equal(a.src, b.src)
        np.testing.assert_array_equal(a.tgt_out, b.tgt_out)


def test_batch_producer_matches_sequence():
    """Test the producer thread delivers the deterministic batch sequence in order"""
    expected = list(islice(batch_sequence(EXAMPLES, 30, seed=4), 6))
    with BatchProducer(EXAMPLES, 30, seed=4, maxsize=2) as producer:
        received = [producer.get() for _ in range(6)]
    assert [i for i, _ in received] == [i for i, _ in expected]
    for (_, a), (_, b) in zip(received, expected):
        np.testing.assert_array_equal(a.tgt_in, b.tgt_in)


def test_train_writes_checkpoints_and_metrics(tmp_path, fast_train_config):
    """Test a short run writes step-stamped checkpoints, latest manifest and metrics"""
    model = Transformer(tiny_config(ShortcutVariant.LEXICAL, dropout_rate=0.1))
    result = train(model, EXAMPLES, fast_train_config, tmp_path, warmup_steps=4, valid=EXAMPLES[:4])
    assert result.step == 6
    names = [p.name for p in list_checkpoints(tmp_path)]
    assert names == [f"checkpoint-{s:08d}.ckpt" for s in (0, 2, 4, 6)]
    assert read_latest(tmp_path).name == "checkpoint-00000006.ckpt"
    rows = _metrics_without_speed(tmp_path / "metrics.csv")
    assert [int(r["step"]) for r in rows] == list(range(1, 7))
    assert "gate.encoder.self.l1" in rows[0]
    assert all(0.0 < float(r["gate.decoder.self.l2"]) < 1.0 for r in rows)
    validation = (tmp_path / "validation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in validation] == ["step", "3", "6"]


def test_training_reduces_loss(tmp_path):
    """Test a few dozen steps lower the training loss on a tiny copy task"""
    config = TrainConfig(total_steps=40, warmup_steps=10, batch_tokens=200, checkpoint_every=40, log_every=10, seed=1)
    model = Transformer(tiny_config(d_model=16, d_ff=32))
    train(model, EXAMPLES, config, tmp_path, warmup_steps=10)
    losses = [float(r["loss"]) for r in _metrics_without_speed(tmp_path / "metrics.csv")]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_resume_continues_exactly(tmp_path, fast_train_config):
    """Test an interrupted and resumed run matches an uninterrupted one"""
    config = tiny_config(ShortcutVariant.FUSION, dropout_rate=0.1)
    straight = tmp_path / "straight"
    train(Transformer(config), EXAMPLES, fast_train_config, straight, warmup_steps=4, valid=EXAMPLES[:4])

    resumed = tmp_path / "resumed"
    half = fast_train_config.model_copy(update={"total_steps": 3})
    train(Transformer(config), EXAMPLES, half, resumed, warmup_steps=4, valid=EXAMPLES[:4])
    result = train(Transformer(config), EXAMPLES, fast_train_config, resumed, warmup_steps=4, valid=EXAMPLES[:4])

    assert result.step == 6
    final_a = load_checkpoint(straight / "checkpoint-00000006.ckpt")
    final_b = load_checkpoint(resumed / "checkpoint-00000006.ckpt")
    for name, array in final_a.params.items():
        np.testing.assert_array_equal(array, final_b.params[name])
    assert _metrics_without_speed(straight / "metrics.csv") == _metrics_without_speed(resumed / "metrics.csv")
    assert (straight / "validation.csv").read_text() == (resumed / "validation.csv").read_text()


def test_keep_checkpoints_prunes_old_files(tmp_path, fast_train_config):
    """Test only the newest checkpoints are kept when a limit is set"""
    config = fast_train_config.model_copy(update={"keep_checkpoints": 2})
    train(Transformer(tiny_config()), EXAMPLES, config, tmp_path, warmup_steps=4)
    assert [p.name for p in list_checkpoints(tmp_path)] == ["checkpoint-00000004.ckpt", "checkpoint-00000006.ckpt"]


def test_average_checkpoints(tmp_path):
    """Test averaging is the elementwise mean of the last k checkpoints"""
    config = tiny_config()
    model = Transformer(config)
    base = model.state_dict()
    paths = []
    for step, offset in ((1, 100.0), (2, 1.0), (3, 3.0)):
        params = {name: array + offset for name, array in base.items()}
        paths.append(save_checkpoint(tmp_path / f"c{step}.ckpt", params, config, step))
    averaged = average_checkpoints(paths, k=2)
    assert averaged.step == 3
    for name, array in base.items():
        np.testing.assert_allclose(averaged.params[name], array + 2.0, atol=1e-12)

    out = save_average(averaged, tmp_path / "average.ckpt")
    reloaded = load_checkpoint(out).build_model()
    np.testing.assert_allclose(reloaded.embedding.numpy(), base["embedding"] + 2.0, atol=1e-12)


def test_average_rejects_mixed_configs(tmp_path):
    """Test checkpoints of different model configs cannot be averaged"""
    a, b = tiny_config(), tiny_config(seed=7)
    first = save_checkpoint(tmp_path / "a.ckpt", Transformer(a).state_dict(), a, 1)
    second = save_checkpoint(tmp_path / "b.ckpt", Transformer(b).state_dict(), b, 2)
    with pytest.raises(CheckpointError):
        average_checkpoints([first, second])


def test_average_rejects_differing_parameter_names(tmp_path):
    """Test checkpoints with different parameter sets raise a checkpoint error naming them"""
    config = tiny_config()
    params = Transformer(config).state_dict()
    partial = {name: array for name, array in params.items() if name != "embedding"}
    paths = [save_checkpoint(tmp_path / "full.ckpt", params, config, 1),
             save_checkpoint(tmp_path / "partial.ckpt", partial, config, 2)]
    with pytest.raises(CheckpointError) as info:
        average_checkpoints(paths)
    assert "embedding" in info.value.message


def test_load_checkpoint_missing(tmp_path):
    """Test a missing checkpoint is a checkpoint error"""
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


@pytest.mark.slow
def test_copy_task_converges(tmp_path, copy_data_config):
    """Test a small lexical-shortcut model learns to copy its training sentences"""
    from app.data.synthetic import gen_corpus
    from app.data.vocab import Vocabulary
    from app.services.batching import encode_pairs
    from app.services.decoding import greedy_decode

    train_pairs = gen_corpus(copy_data_config).splits["train"]
    vocab = Vocabulary.build([p.src for p in train_pairs])
    examples = encode_pairs(train_pairs, vocab)
    config = tiny_config(ShortcutVariant.LEXICAL, d_model=32, head_count=4, d_ff=64, vocab_size=len(vocab))
    model = Transformer(config)
    train(model, examples, TrainConfig(total_steps=400, warmup_steps=50, batch_tokens=400, checkpoint_every=400),
          tmp_path, warmup_steps=50)
    hypotheses = greedy_decode(model, [src for src, _ in examples])
    exact = np.mean([h.tokens == tgt for h, (_, tgt) in zip(hypotheses, examples)])
    assert exact > 0.9


def test_average_of_identical_checkpoints_is_exact(tmp_path):
    """Test averaging copies of one checkpoint reproduces it bit for bit"""
    config = tiny_config()
    params = Transformer(config).state_dict()
    paths = [save_checkpoint(tmp_path / f"c{i}.ckpt", params, config, i) for i in range(3)]
    averaged = average_checkpoints(paths)
    for name, array in params.items():
        np.testing.assert_array_equal(averaged.params[name], array)


def test_average_of_zero_and_two_is_one(tmp_path):
    """Test constant weights 0 and 2 average to exactly 1"""
    config = tiny_config()
    names = Transformer(config).state_dict()
    zeros = {name: np.zeros_like(array) for name, array in names.items()}
    twos = {name: np.full_like(array, 2.0) for name, array in names.items()}
    paths = [save_checkpoint(tmp_path / "zero.ckpt", zeros, config, 1),
             save_checkpoint(tmp_path / "two.ckpt", twos, config, 2)]
    averaged = average_checkpoints(paths)
    assert all(np.array_equal(array, np.ones_like(array)) for array in averaged.params.values())
