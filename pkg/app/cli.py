"""
`lexshort` command line.

    lexshort gen-data --task lexicon --size 2000 --out data/lexicon
    lexshort train --config run.json model.variant=fusion train.total_steps=3000
    lexshort translate --checkpoint runs/fusion --input test.src
    lexshort evaluate --checkpoint runs/fusion/average.ckpt --data data/lexicon
    lexshort probe --checkpoint runs/fusion --data data/lexicon
    lexshort analyze --checkpoint runs/fusion --data data/lexicon
    lexshort average --run-dir runs/fusion --last 5 --out runs/fusion/average.ckpt
    lexshort serve --checkpoint runs/fusion/average.ckpt

Every command takes `--config FILE` plus dotted `key.path=value` overrides.
Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from app.core import config as settings
from app.core.config import load_run_config, write_resolved_config
from app.core.exceptions import ConfigError, DataError, LexShortError
from app.core.logging import setup_logging
from app.crud.checkpoint import list_checkpoints, load_checkpoint, resolve_checkpoint
from app.crud.corpus import (
    CONTRASTIVE_FILE,
    VOCAB_FILE,
    load_vocab,
    read_contrastive,
    read_lines,
    read_split,
    write_contrastive,
    write_lines,
    write_split,
)
from app.crud.reports import (
    EVAL_REPORT,
    HYPOTHESES_FILE,
    PROBE_TABLES,
    read_probe_report,
    write_json,
    write_probe_report,
    write_rows,
)
from app.crud.state_dump import load_state_dump, save_state_dump
from app.data.bpe import learn_bpe, undo_bpe
from app.data.synthetic import contrastive_records, gen_corpus, segment_pair, segment_record
from app.data.vocab import Vocabulary
from app.models.transformer import Transformer
from app.schemas.data import Task
from app.schemas.model import ShortcutVariant
from app.schemas.run import RunConfig
from app.schemas.translate import EvaluationReport
from app.services.batching import encode_pairs
from app.services.evaluation import bleu_with_signature, contrastive_score, mean_sentence_bleu, sequence_accuracy
from app.services.translator import Translator

logger = logging.getLogger("lexshort")

CORPUS_MANIFEST = "corpus.json"


class UsageParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _config(args, extra: Sequence[str] = ()) -> RunConfig:
    return load_run_config(args.config, list(extra) + list(args.overrides))


def _flag_overrides(pairs) -> List[str]:
    """Shorthand flags as dotted overrides; unset flags are skipped."""
    return [f"{key}={json.dumps(value)}" for key, value in pairs if value is not None]


def cmd_gen_data(args) -> int:
    run = _config(args, _flag_overrides([
        ("data.task", args.task), ("data.size", args.size), ("data.seed", args.seed), ("data.path", args.out),
    ]))
    data = run.data
    out_dir = Path(data.path)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = gen_corpus(data)

    merges = []
    if data.bpe_merges:
        train = corpus.splits["train"]
        merges = learn_bpe(
            [" ".join(p.src) for p in train] + [" ".join(p.tgt) for p in train],
            data.bpe_merges,
            data.bpe_threshold,
        )
    records = contrastive_records(corpus.splits["test"]) if data.task is Task.LEXICON else []
    if merges:
        corpus.splits = {name: [segment_pair(p, merges) for p in pairs] for name, pairs in corpus.splits.items()}
        records = [segment_record(r, merges) for r in records]

    for name, pairs in corpus.splits.items():
        write_split(out_dir, name, pairs)
    train = corpus.splits["train"]
    vocab = Vocabulary.build([p.src for p in train] + [p.tgt for p in train], merges=merges)
    vocab.save(out_dir / VOCAB_FILE)
    if data.task is Task.LEXICON:
        write_contrastive(out_dir / CONTRASTIVE_FILE, records)
    manifest = {"data": data.model_dump(mode="json"), "splits": corpus.sizes(), "vocab_size": len(vocab),
                "bpe_merges": len(merges), "contrastive_records": len(records)}
    (out_dir / CORPUS_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Corpus written to {out_dir}: {corpus.sizes()}, vocabulary {len(vocab)}")
    return 0


def cmd_train(args) -> int:
    from app.services.trainer import train

    run = _config(args, _flag_overrides([
        ("model.variant", args.variant), ("data.path", args.data), ("run_dir", args.run_dir),
        ("train.total_steps", args.steps),
    ]))
    corpus_dir = Path(run.data.path)
    vocab = load_vocab(corpus_dir)
    if run.model.vocab_size != len(vocab):
        logger.info(f"vocab_size set to {len(vocab)} from {corpus_dir / VOCAB_FILE}")
        run = run.model_copy(update={"model": run.model.model_copy(update={"vocab_size": len(vocab)})})
    train_pairs = read_split(corpus_dir, "train")
    valid_path = corpus_dir / "valid.src"
    valid_pairs = read_split(corpus_dir, "valid") if valid_path.exists() else []

    if run.run_dir is None:
        run = run.model_copy(update={"run_dir": str(Path(settings.RUNS_DIR) / run.model.variant.value)})
    run_dir = Path(run.run_dir)
    write_resolved_config(run, run_dir)
    logger.info(
        f"Training {run.model.variant.value} ({Transformer.parameter_count(run.model):,} parameters, "
        f"warm-up {run.warmup_steps}) in {run_dir}"
    )
    result = train(
        Transformer(run.model),
        encode_pairs(train_pairs, vocab),
        run.train,
        run_dir,
        run.warmup_steps,
        valid=encode_pairs(valid_pairs, vocab),
        vocab=vocab,
        resume=not args.fresh,
    )
    logger.info(f"Finished at step {result.step}: loss {result.last_loss}")
    if args.plot:
        from app.services.plotting import plot_training

        plot_training(run_dir)
    return 0


def _load_translator(args) -> Translator:
    return Translator.load(args.checkpoint, getattr(args, "vocab", None))


def cmd_translate(args) -> int:
    run = _config(args)
    translator = _load_translator(args)
    beam = args.beam or run.decode.beam_size
    lines = read_lines(args.input) if args.input != "-" else sys.stdin.read().splitlines()
    out = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            logger.warning(f"line {number} is empty; emitting an empty translation")
            out.append("")
            continue
        hyp = translator.translate([line], beam, args.max_len or run.decode.max_len, run.decode.len_penalty)[0]
        out.append(hyp.text)
    if args.output:
        write_lines(args.output, out)
    else:
        sys.stdout.write("".join(f"{line}\n" for line in out))
    return 0


def cmd_evaluate(args) -> int:
    run = _config(args, _flag_overrides([("data.path", args.data)]))
    translator = _load_translator(args)
    corpus_dir = Path(run.data.path)
    pairs = read_split(corpus_dir, args.split)
    if not pairs:
        raise DataError(f"{corpus_dir / args.split}.src holds no sentences")
    checkpoint = load_checkpoint(translator.checkpoint)
    report = EvaluationReport(
        checkpoint=str(translator.checkpoint),
        config_hash=checkpoint.config_hash,
        seed=checkpoint.config.seed,
        variant=checkpoint.config.variant.value,
        step=checkpoint.step,
    )

    beam = args.beam or run.decode.beam_size
    hypotheses = translator.translate([" ".join(p.src) for p in pairs], beam, run.decode.max_len, run.decode.len_penalty,
                                       segmented=True)
    texts = [h.text for h in hypotheses]
    references = [undo_bpe(" ".join(p.tgt)) for p in pairs]
    report.bleu, report.bleu_signature = bleu_with_signature(texts, references)
    report.sentences = len(pairs)
    report.unfinished = sum(not h.finished for h in hypotheses)
    report.sentence_bleu_mean = mean_sentence_bleu(texts, references)
    logger.info(f"BLEU {report.bleu:.2f}, exact match {sequence_accuracy(texts, references):.4f}")

    contrastive_path = Path(args.contrastive) if args.contrastive else corpus_dir / CONTRASTIVE_FILE
    records = read_contrastive(contrastive_path) if args.contrastive or contrastive_path.exists() else []
    if contrastive_path.exists() and not records:
        logger.warning(f"{contrastive_path} holds no records; contrastive accuracy not reported")
    if records:
        result = contrastive_score(translator.model, records, translator.vocab, run.decode.contrastive_normalize)
        report.contrastive_accuracy = result.accuracy
        report.contrastive_records = result.total
        report.contrastive_excluded = result.excluded
        report.contrastive_ties = result.ties
        report.contrastive_normalized = result.normalized

    out_dir = Path(args.out) if args.out else translator.checkpoint.parent
    write_lines(out_dir / HYPOTHESES_FILE, texts)
    write_json(report, out_dir / EVAL_REPORT)
    sys.stdout.write(report.model_dump_json(indent=2) + "\n")
    return 0


def cmd_probe(args) -> int:
    from app.services.probing import run_probe_suite

    run = _config(args, _flag_overrides([("data.path", args.data)]))
    translator = _load_translator(args)
    pairs = read_split(run.data.path, args.split)
    dump = load_state_dump(args.states) if args.states else None
    report, dump = run_probe_suite(translator.model, pairs, translator.vocab, run.probe,
                                   checkpoint=str(translator.checkpoint), dump=dump)
    out_dir = Path(args.out) if args.out else translator.checkpoint.parent / "probe"
    write_probe_report(report, out_dir)
    if args.save_states:
        save_state_dump(dump, out_dir / "states")
    for note in report.notes:
        logger.info(note)
    if args.plot:
        from app.services.plotting import plot_probe

        plot_probe({report.variant: report}, out_dir / "probe.svg")
    return 0


def cmd_analyze(args) -> int:
    from app.services.probing import compare_reports, cosine_profile, dump_states, gate_stats

    if not args.checkpoint and not args.compare:
        raise ConfigError("analyze needs --checkpoint and/or --compare BASELINE SHORTCUT")
    run = _config(args, _flag_overrides([("data.path", args.data)]))
    out_dir = Path(args.out or "analysis")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        translator = _load_translator(args)
        pairs = read_split(run.data.path, args.split)
        if run.probe.max_sentences is not None:
            pairs = pairs[: run.probe.max_sentences]
        model = translator.model
        cosine = cosine_profile(dump_states(model, pairs, translator.vocab))
        write_rows(out_dir / PROBE_TABLES["cosine"], [row.model_dump(mode="json") for row in cosine],
                   ["side", "layer", "cosine", "positions", "skipped"])
        if model.variant is ShortcutVariant.NONE or model.config.gateless_shortcuts:
            logger.info(f"variant {model.variant.value} has no gates; {PROBE_TABLES['gates']} not written")
        else:
            stats = gate_stats(model, pairs, translator.vocab)
            write_rows(out_dir / PROBE_TABLES["gates"], [row.model_dump(mode="json") for row in stats],
                       ["side", "kind", "layer", "head", "gate", "mean", "std", "count"])

    if args.compare:
        baseline, shortcut = (read_probe_report(path) for path in args.compare)
        rows = compare_reports(baseline, shortcut)
        write_rows(out_dir / "comparison.csv", rows, ["side", "layer", "baseline", "shortcut", "difference"])
        if args.plot:
            from app.services.plotting import plot_probe

            plot_probe({baseline.variant: baseline, shortcut.variant: shortcut}, out_dir / "comparison.svg")
    return 0


def cmd_average(args) -> int:
    from app.services.trainer import average_checkpoints, save_average

    if args.checkpoints:
        paths = [Path(p) for p in args.checkpoints]
    elif args.run_dir:
        paths = [p for p in list_checkpoints(args.run_dir) if not p.name.endswith("-00000000.ckpt")]
    else:
        raise ConfigError("average needs --checkpoints or --run-dir")
    k = args.last
    if k is None and args.run_dir:
        resolved = Path(args.run_dir) / settings.RESOLVED_CONFIG
        config_path = args.config or (resolved if resolved.exists() else None)
        k = load_run_config(config_path, args.overrides).train.average_last_k
        logger.info(f"Averaging the last {k} checkpoints of {args.run_dir}")
    averaged = average_checkpoints(paths, k)
    out = Path(args.out) if args.out else paths[-1].parent / "average.ckpt"
    save_average(averaged, out)
    sys.stdout.write(f"{out}\n")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    if args.checkpoint:
        settings.SERVED_CHECKPOINT = str(resolve_checkpoint(args.checkpoint))
    if args.vocab:
        settings.SERVED_VOCAB = args.vocab
    if not settings.SERVED_CHECKPOINT:
        raise ConfigError("serve needs --checkpoint or LEXSHORT_CHECKPOINT")
    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level=settings.LOG_LEVEL.lower())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="lexshort", description="Transformer translation with lexical shortcuts")
    parser.add_argument("--log-level", default=None, help="Overrides LEXSHORT_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None, help="JSON run configuration")
        sub.add_argument("overrides", nargs="*", help="Dotted key.path=value overrides")
        sub.set_defaults(handler=handler)
        return sub

    sub = command("gen-data", cmd_gen_data, "generate a synthetic parallel corpus")
    sub.add_argument("--task", choices=[t.value for t in Task])
    sub.add_argument("--size", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out")

    sub = command("train", cmd_train, "train a model, resuming from the run's latest checkpoint")
    sub.add_argument("--variant", help="none|lexical|fusion|nonlexical|dec2enc|dec2enc+self")
    sub.add_argument("--data", help="Corpus directory")
    sub.add_argument("--run-dir")
    sub.add_argument("--steps", type=int)
    sub.add_argument("--fresh", action="store_true", help="Ignore existing checkpoints")
    sub.add_argument("--plot", action="store_true", help="Write training.svg")

    sub = command("translate", cmd_translate, "translate sentences with beam search")
    sub.add_argument("--checkpoint", required=True, help="Checkpoint file or run directory")
    sub.add_argument("--vocab")
    sub.add_argument("--input", default="-")
    sub.add_argument("--output")
    sub.add_argument("--beam", type=int)
    sub.add_argument("--max-len", type=int)

    sub = command("evaluate", cmd_evaluate, "BLEU and contrastive accuracy on a held-out split")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--vocab")
    sub.add_argument("--data")
    sub.add_argument("--split", default="test")
    sub.add_argument("--contrastive", help="Contrastive records (default: <data>/contrastive.jsonl if present)")
    sub.add_argument("--beam", type=int)
    sub.add_argument("--out")

    sub = command("probe", cmd_probe, "lexical probes, cosine profile and gate statistics")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--vocab")
    sub.add_argument("--data")
    sub.add_argument("--split", default="test")
    sub.add_argument("--states", help="Reuse a saved state dump")
    sub.add_argument("--save-states", action="store_true")
    sub.add_argument("--out")
    sub.add_argument("--plot", action="store_true")

    sub = command("analyze", cmd_analyze, "cosine profile and gate statistics; compare probe reports")
    sub.add_argument("--checkpoint")
    sub.add_argument("--vocab")
    sub.add_argument("--data")
    sub.add_argument("--split", default="test")
    sub.add_argument("--compare", nargs=2, metavar=("BASELINE", "SHORTCUT"), help="Probe report directories")
    sub.add_argument("--out")
    sub.add_argument("--plot", action="store_true")

    sub = command("average", cmd_average, "average the last k checkpoints")
    sub.add_argument("--checkpoints", nargs="+")
    sub.add_argument("--run-dir")
    sub.add_argument("--last", type=int, help="Defaults to train.average_last_k of the run with --run-dir")
    sub.add_argument("--out")

    sub = command("serve", cmd_serve, "serve the translation API")
    sub.add_argument("--checkpoint")
    sub.add_argument("--vocab")
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except LexShortError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
