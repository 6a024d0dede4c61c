"""
Training loop: warm-up schedule, Adam, gradient accumulation, periodic
validation and checkpointing, resume from the latest checkpoint, and
checkpoint averaging.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app.core.exceptions import CheckpointError, DataError, NumericalError
from app.core.rng import Rng
from app.core.tensor import Tape
from app.crud.checkpoint import (
    checkpoint_name,
    list_checkpoints,
    load_checkpoint,
    read_latest,
    save_checkpoint,
    write_latest,
)
from app.data.vocab import Vocabulary
from app.models.state import Batch, GateRecorder
from app.models.transformer import Transformer
from app.schemas.model import ModelConfig
from app.schemas.train import TrainConfig
from app.services.batching import BatchProducer, Example, pack_batches
from app.services.optimizer import AdamState, adam_step, noam_lr

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
VALIDATION_FILE = "validation.csv"


@dataclass
class TrainResult:
    run_dir: Path
    step: int
    checkpoints: List[Path] = field(default_factory=list)
    last_loss: Optional[float] = None
    last_validation: Optional[float] = None


def accumulate_gradients(model: Transformer, batches: Sequence[Batch], rngs: Sequence[Optional[Rng]]):
    """
    Token-weighted mean of the micro-batch gradients, i.e. the gradient of the
    mean loss over all target tokens of `batches`. Returns (grads, loss, tokens).
    """
    params = model.parameters()
    totals: Dict[str, np.ndarray] = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in params.items()}
    loss_sum, tokens = 0.0, 0
    for batch, rng in zip(batches, rngs):
        for param in params.values():
            param.grad = None
        with Tape() as tape:
            loss = model.forward_loss(batch, rng=rng)
        tape.backward(loss)
        count = batch.target_tokens
        for name, param in params.items():
            if param.grad is not None:
                totals[name] += param.grad * count
        loss_sum += loss.item() * count
        tokens += count
    grads = {name: (total / tokens).astype(params[name].dtype) for name, total in totals.items()}
    return grads, loss_sum / tokens, tokens


def evaluate_loss(model: Transformer, batches: Sequence[Batch]) -> float:
    """Token-weighted mean loss, no dropout, no tape."""
    loss_sum, tokens = 0.0, 0
    for batch in batches:
        loss_sum += model.forward_loss(batch).item() * batch.target_tokens
        tokens += batch.target_tokens
    if tokens == 0:
        raise DataError("validation set has no target tokens")
    return loss_sum / tokens


def _truncate_csv(path: Path, last_step: int) -> None:
    """Drop rows logged after `last_step` (written before an interrupted run's last checkpoint was superseded)."""
    if not path.exists():
        return
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    kept = [rows[0]] + [row for row in rows[1:] if int(row[0]) <= last_step]
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(kept)


class Trainer:
    def __init__(
        self,
        model: Transformer,
        train_config: TrainConfig,
        run_dir: Union[str, Path],
        warmup_steps: int,
        vocab: Optional[Vocabulary] = None,
    ):
        self.model = model
        self.config = train_config
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.warmup = warmup_steps
        self.vocab = vocab
        self.state = AdamState(train_config.adam_beta1, train_config.adam_beta2, train_config.adam_eps)
        self.step = 0
        self.checkpoints: List[Path] = []
        self.gate_columns = [f"gate.{key}" for key in model.gate_params()]

    def resume(self) -> bool:
        """Restore parameters, optimizer moments and step from the run's latest checkpoint."""
        latest = read_latest(self.run_dir)
        if latest is None:
            return False
        checkpoint = load_checkpoint(latest)
        if checkpoint.config_hash != self.model.config.hash():
            raise CheckpointError(f"{latest} was trained with a different model config")
        self.model.load_state_dict(checkpoint.params)
        if checkpoint.optimizer is not None:
            self.state.load(checkpoint.optimizer)
        self.step = checkpoint.step
        self.checkpoints = [p for p in list_checkpoints(self.run_dir) if p.exists()]
        _truncate_csv(self.run_dir / METRICS_FILE, self.step)
        _truncate_csv(self.run_dir / VALIDATION_FILE, self.step)
        logger.info(f"Resumed from {latest.name} at step {self.step}")
        return True

    def save(self) -> Path:
        path = save_checkpoint(
            self.run_dir / checkpoint_name(self.step),
            self.model.state_dict(),
            self.model.config,
            self.step,
            vocab=self.vocab,
            optimizer=self.state.to_dict(),
            meta={"warmup_steps": self.warmup, "train_seed": self.config.seed},
        )
        write_latest(self.run_dir, path, self.step)
        if path not in self.checkpoints:
            self.checkpoints.append(path)
        if self.config.keep_checkpoints and len(self.checkpoints) > self.config.keep_checkpoints:
            for stale in self.checkpoints[: -self.config.keep_checkpoints]:
                stale.unlink(missing_ok=True)
            self.checkpoints = self.checkpoints[-self.config.keep_checkpoints:]
        return path

    def _writer(self, name: str, header: List[str]):
        path = self.run_dir / name
        fresh = not path.exists() or path.stat().st_size == 0
        fh = path.open("a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(header)
        return fh, writer

    def train(self, examples: Sequence[Example], valid: Sequence[Example] = ()) -> TrainResult:
        cfg = self.config
        k = cfg.accumulation_factor
        valid_batches = pack_batches(valid, cfg.batch_tokens) if valid else []
        result = TrainResult(self.run_dir, self.step)

        if self.step == 0 and not self.checkpoints:
            self.save()
        if self.step >= cfg.total_steps:
            logger.info(f"Nothing to train: step {self.step} >= total_steps {cfg.total_steps}")
            result.checkpoints = list(self.checkpoints)
            return result

        metrics_fh, metrics = self._writer(METRICS_FILE, ["step", "loss", "lr", "tokens_per_sec"] + self.gate_columns)
        valid_fh, validation = self._writer(VALIDATION_FILE, ["step", "loss", "tokens"])
        recorder = GateRecorder()
        self.model.recorder = recorder if self.gate_columns else None
        dropout_rng = Rng(cfg.seed).split("dropout")
        producer = BatchProducer(examples, cfg.batch_tokens, cfg.seed, start=self.step * k, maxsize=cfg.queue_size)
        try:
            with producer:
                while self.step < cfg.total_steps:
                    started = time.perf_counter()
                    next_step = self.step + 1
                    rate = noam_lr(next_step, self.model.config.d_model, self.warmup, cfg.lr_scale)
                    items = [producer.get() for _ in range(k)]
                    rngs = [dropout_rng.split(str(index)) for index, _ in items]
                    recorder.clear()
                    try:
                        grads, loss, tokens = accumulate_gradients(self.model, [b for _, b in items], rngs)
                        adam_step(self.model.parameters(), grads, self.state, rate)
                    except NumericalError as e:
                        logger.error(f"Training diverged at step {next_step}: {e}; last checkpoint kept")
                        raise
                    self.step = next_step
                    result.last_loss = loss

                    elapsed = max(time.perf_counter() - started, 1e-9)
                    means = recorder.layer_means()
                    gates = [f"{means.get(col[len('gate.'):], float('nan')):.6f}" for col in self.gate_columns]
                    metrics.writerow([self.step, f"{loss:.6f}", f"{rate:.8e}", f"{tokens / elapsed:.1f}"] + gates)
                    if self.step % cfg.log_every == 0:
                        metrics_fh.flush()
                        logger.info(f"step {self.step}: loss={loss:.4f} lr={rate:.3e} tokens/s={tokens / elapsed:.0f}")

                    if valid_batches and (self.step % cfg.validate_every == 0 or self.step == cfg.total_steps):
                        self.model.recorder = None
                        result.last_validation = evaluate_loss(self.model, valid_batches)
                        self.model.recorder = recorder if self.gate_columns else None
                        validation.writerow([self.step, f"{result.last_validation:.6f}",
                                             sum(b.target_tokens for b in valid_batches)])
                        valid_fh.flush()
                        logger.info(f"step {self.step}: validation loss={result.last_validation:.4f}")

                    if self.step % cfg.checkpoint_every == 0 or self.step == cfg.total_steps:
                        metrics_fh.flush()
                        self.save()
        finally:
            self.model.recorder = None
            metrics_fh.close()
            valid_fh.close()

        result.step = self.step
        result.checkpoints = list(self.checkpoints)
        return result


def train(
    model: Transformer,
    examples: Sequence[Example],
    train_config: TrainConfig,
    run_dir: Union[str, Path],
    warmup_steps: int,
    valid: Sequence[Example] = (),
    vocab: Optional[Vocabulary] = None,
    resume: bool = True,
) -> TrainResult:
    trainer = Trainer(model, train_config, run_dir, warmup_steps, vocab)
    if resume:
        trainer.resume()
    return trainer.train(examples, valid)


@dataclass
class AveragedCheckpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    step: int
    sources: List[Path]
    vocab: Optional[Vocabulary] = None


def average_checkpoints(paths: Sequence[Union[str, Path]], k: Optional[int] = None) -> AveragedCheckpoint:
    """Elementwise mean of the last `k` of `paths` (all when k is None), accumulated in float64."""
    paths = [Path(p) for p in paths]
    if k is not None:
        if k < 1:
            raise CheckpointError(f"k must be >= 1, got {k}")
        paths = paths[-k:]
    if not paths:
        raise CheckpointError("no checkpoints to average")

    first = load_checkpoint(paths[0])
    sums = {name: array.astype(np.float64) for name, array in first.params.items()}
    step = first.step
    for path in paths[1:]:
        checkpoint = load_checkpoint(path)
        step = checkpoint.step
        if checkpoint.config_hash != first.config_hash:
            raise CheckpointError(
                f"config hash mismatch: {path.name} has {checkpoint.config_hash}, "
                f"{paths[0].name} has {first.config_hash}"
            )
        if checkpoint.params.keys() != sums.keys():
            differing = sorted(set(checkpoint.params) ^ set(sums))
            raise CheckpointError(f"{path.name} and {paths[0].name} hold different parameters: {differing}")
        for name, array in checkpoint.params.items():
            sums[name] += array
    params = {name: (total / len(paths)).astype(first.params[name].dtype) for name, total in sums.items()}
    logger.info(f"Averaged {len(paths)} checkpoints: {[p.name for p in paths]}")
    return AveragedCheckpoint(first.config, params, step, paths, first.vocab)


def save_average(averaged: AveragedCheckpoint, out: Union[str, Path]) -> Path:
    return save_checkpoint(
        out, averaged.params, averaged.config, averaged.step, vocab=averaged.vocab,
        meta={"averaged_from": [p.name for p in averaged.sources]},
    )
