import json

import numpy as np
import pytest

from app.cli import CORPUS_MANIFEST, main
from app.crud.checkpoint import list_checkpoints, load_checkpoint
from app.crud.reports import EVAL_REPORT, HYPOTHESES_FILE, PROBE_REPORT, read_rows

TINY_MODEL = ["model.variant=lexical", "model.n_layers=1", "model.d_model=8", "model.head_count=2",
              "model.d_ff=16", "model.max_len=16", "model.dropout_rate=0.0"]
TINY_TRAIN = ["train.warmup_steps=2", "train.batch_tokens=200", "train.checkpoint_every=2",
              "train.validate_every=2", "train.log_every=2"]
TINY_DATA = ["data.content_words=6", "data.function_words=2", "data.ambiguous_words=2", "data.min_len=3",
             "data.max_len=4", "data.valid_fraction=0.1", "data.test_fraction=0.2"]


def _gen(out, *extra):
    return main(["gen-data", "--task", "lexicon", "--size", "60", "--out", str(out), *TINY_DATA, *extra])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Corpus plus a four-step lexical-shortcut run shared by the pipeline tests"""
    root = tmp_path_factory.mktemp("pipeline")
    data, run = root / "data", root / "run"
    assert _gen(data) == 0
    assert main(["train", "--data", str(data), "--run-dir", str(run), "--steps", "4", *TINY_MODEL, *TINY_TRAIN]) == 0
    return root, data, run


def test_gen_data_is_reproducible(tmp_path):
    """Test two generations with the same seed write identical files"""
    assert _gen(tmp_path / "a") == 0
    assert _gen(tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert "contrastive.jsonl" in names
    for name in names:
        if name != CORPUS_MANIFEST:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifests = [json.loads((tmp_path / d / CORPUS_MANIFEST).read_text()) for d in ("a", "b")]
    for manifest in manifests:
        manifest["data"].pop("path")
    assert manifests[0] == manifests[1]


def test_gen_data_smallest_split(tmp_path):
    """Test a 12-sentence corpus splits into 10/1/1"""
    assert main(["gen-data", "--task", "copy", "--size", "12", "--out", str(tmp_path)]) == 0
    counts = {name: len((tmp_path / f"{name}.src").read_text().splitlines()) for name in ("train", "valid", "test")}
    assert counts == {"train": 10, "valid": 1, "test": 1}
    assert not (tmp_path / "contrastive.jsonl").exists()


def test_gen_data_with_bpe(tmp_path):
    """Test subword segmentation is learned and recorded in the vocabulary"""
    assert _gen(tmp_path, "data.bpe_merges=5", "data.bpe_threshold=1") == 0
    manifest = json.loads((tmp_path / CORPUS_MANIFEST).read_text())
    assert manifest["bpe_merges"] > 0
    assert json.loads((tmp_path / "vocab.json").read_text())["merges"]


def test_invalid_variant_is_usage_error(tmp_path):
    """Test an unknown variant exits with code 1"""
    assert main(["train", "--variant", "bogus", "--data", str(tmp_path)]) == 1


def test_unknown_override_is_usage_error(tmp_path):
    """Test overrides naming unknown keys are rejected"""
    assert main(["gen-data", "--out", str(tmp_path), "data.colour=red"]) == 1


def test_unknown_command_exits_1():
    """Test argparse usage errors exit with code 1"""
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 1


def test_missing_corpus_is_data_error(tmp_path):
    """Test training without a corpus exits with code 2"""
    assert main(["train", "--data", str(tmp_path / "none"), "--run-dir", str(tmp_path / "run")]) == 2


def test_train_writes_run_directory(trained):
    """Test checkpoints, metrics and the resolved config of the shared run"""
    _, _, run = trained
    assert [p.name for p in list_checkpoints(run)] == [f"checkpoint-{s:08d}.ckpt" for s in (0, 2, 4)]
    config = json.loads((run / "config.json").read_text())
    assert config["train"]["warmup_steps"] == 2
    assert config["model"]["variant"] == "lexical"
    assert (run / "metrics.csv").exists()
    assert load_checkpoint(run / "checkpoint-00000004.ckpt").vocab is not None


def test_train_again_resumes(trained):
    """Test rerunning a finished run trains nothing further"""
    _, data, run = trained
    assert main(["train", "--data", str(data), "--run-dir", str(run), "--steps", "4", *TINY_MODEL, *TINY_TRAIN]) == 0
    assert len(list_checkpoints(run)) == 3


def test_translate_file(trained, tmp_path):
    """Test one output line per input line, blank lines staying blank"""
    _, data, run = trained
    source = tmp_path / "in.txt"
    source.write_text("n0 n1 n2\n\nn3 n1\n")
    out = tmp_path / "out.txt"
    assert main(["translate", "--checkpoint", str(run), "--input", str(source), "--output", str(out), "--beam", "2"]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3
    assert lines[1] == ""


def test_translate_empty_input(trained, tmp_path):
    """Test an empty input file yields an empty output and success"""
    _, _, run = trained
    source = tmp_path / "empty.txt"
    source.write_text("")
    out = tmp_path / "out.txt"
    assert main(["translate", "--checkpoint", str(run), "--input", str(source), "--output", str(out)]) == 0
    assert out.read_text() == ""


def test_evaluate_writes_report(trained, tmp_path, capsys):
    """Test BLEU, contrastive accuracy and provenance in the evaluation report"""
    _, data, run = trained
    assert main(["evaluate", "--checkpoint", str(run), "--data", str(data), "--beam", "2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / EVAL_REPORT).read_text())
    assert 0.0 <= report["bleu"] <= 100.0
    assert report["step"] == 4
    assert report["variant"] == "lexical"
    assert report["contrastive_records"] > 0
    assert 0.0 <= report["contrastive_accuracy"] <= 1.0
    assert len((tmp_path / HYPOTHESES_FILE).read_text().splitlines()) == report["sentences"] == 12
    assert json.loads(capsys.readouterr().out)["config_hash"] == report["config_hash"]


def test_average_probe_and_analyze(trained, capsys):
    """Test averaging the run, probing the average and comparing probe reports"""
    root, data, run = trained
    average = root / "average.ckpt"
    assert main(["average", "--run-dir", str(run), "--last", "2", "--out", str(average)]) == 0
    assert capsys.readouterr().out.strip() == str(average)
    assert load_checkpoint(average).meta["averaged_from"] == ["checkpoint-00000002.ckpt", "checkpoint-00000004.ckpt"]

    probe_dir = root / "probe"
    assert main(["probe", "--checkpoint", str(average), "--data", str(data), "--out", str(probe_dir),
                 "--save-states", "probe.epochs=2", "probe.hidden_units=8"]) == 0
    assert (probe_dir / PROBE_REPORT).exists()
    assert len(read_rows(probe_dir / "probe_accuracy.csv")) == 4
    assert (probe_dir / "states").is_dir()

    analysis = root / "analysis"
    assert main(["analyze", "--checkpoint", str(run), "--data", str(data), "--out", str(analysis),
                 "--compare", str(probe_dir), str(probe_dir)]) == 0
    assert len(read_rows(analysis / "cosine.csv")) == 4
    assert read_rows(analysis / "gates.csv")
    comparison = read_rows(analysis / "comparison.csv")
    assert all(float(row["difference"]) == 0.0 for row in comparison)


def test_average_defaults_to_configured_last_k(trained, tmp_path, capsys):
    """Test averaging a run directory without --last uses the run's train.average_last_k"""
    _, data, _ = trained
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--run-dir", str(run), "--steps", "8", *TINY_MODEL, *TINY_TRAIN,
                 "train.average_last_k=2"]) == 0
    assert len(list_checkpoints(run)) == 5
    average = tmp_path / "average.ckpt"
    assert main(["average", "--run-dir", str(run), "--out", str(average)]) == 0
    capsys.readouterr()

    averaged = load_checkpoint(average)
    assert averaged.meta["averaged_from"] == ["checkpoint-00000006.ckpt", "checkpoint-00000008.ckpt"]
    assert averaged.step == 8
    six, eight = load_checkpoint(run / "checkpoint-00000006.ckpt"), load_checkpoint(run / "checkpoint-00000008.ckpt")
    for name, array in averaged.params.items():
        np.testing.assert_allclose(array, (six.params[name] + eight.params[name]) / 2, rtol=1e-6, atol=1e-7)


def test_analyze_needs_a_mode():
    """Test analyze without a checkpoint or comparison is a usage error"""
    assert main(["analyze"]) == 1
