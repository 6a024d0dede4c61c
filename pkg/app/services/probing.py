"""
Lexical probing of frozen translation models: state dumps, per-layer probe
classifiers, embedding/state cosine profiles, frequency- and tag-conditioned
accuracy, and gate activation statistics.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError, DataError
from app.core.rng import Rng
from app.core.tensor import Tape, Tensor, cross_entropy
from app.crud.state_dump import SideDump, StateDump
from app.data.vocab import UNK_ID, Vocabulary
from app.models.probe import ProbeClassifier
from app.models.state import Batch, GateRecorder
from app.models.transformer import Transformer
from app.schemas.data import SentencePair
from app.schemas.model import ShortcutVariant
from app.schemas.probe import (
    Condition,
    ConditionedRow,
    GateStat,
    LayerAccuracy,
    LayerCosine,
    ProbeConfig,
    ProbeReport,
)
from app.services.optimizer import AdamState, adam_step
from app.utils.hashing import parameter_checksum

logger = logging.getLogger(__name__)

SIDES = ("encoder", "decoder")


def _collect(side_rows: Dict[str, list]) -> SideDump:
    return SideDump(
        states=np.stack(side_rows["states"]).astype(np.float32),
        embeddings=np.stack(side_rows["embeddings"]).astype(np.float32),
        token_ids=np.asarray(side_rows["token_ids"], dtype=np.int64),
        tags=list(side_rows["tags"]),
        freq_ranks=np.asarray(side_rows["freq_ranks"], dtype=np.int64),
        sentence_ids=np.asarray(side_rows["sentence_ids"], dtype=np.int64),
        positions=np.asarray(side_rows["positions"], dtype=np.int64),
        unk=np.asarray(side_rows["unk"], dtype=bool),
    )


def dump_states(model: Transformer, pairs: Sequence[SentencePair], vocab: Vocabulary, batch_size: int = 32) -> StateDump:
    """
    Hidden states H_0..H_N of every non-padding position under teacher forcing.
    Encoder entries align with source tokens (the appended EOS is left out);
    decoder entries align with target tokens, i.e. decoder input positions
    1..len(target) (BOS is left out). Unknown tokens are kept and flagged.
    """
    if not pairs:
        raise DataError("cannot dump states of an empty corpus")
    rows = {side: {k: [] for k in ("states", "embeddings", "token_ids", "tags", "freq_ranks",
                                   "sentence_ids", "positions", "unk")} for side in SIDES}
    unknown = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        encoded = [(vocab.encode(p.src), vocab.encode(p.tgt)) for p in chunk]
        batch = Batch.from_pairs(encoded)
        encoder = model.encode(batch.src)
        _, decoder = model.decode(batch.tgt_in, encoder, return_states=True)
        stacks = {
            "encoder": (np.stack([h.numpy() for h in encoder.hidden], axis=2), encoder.table_embeddings.numpy()),
            "decoder": (np.stack([h.numpy() for h in decoder.hidden], axis=2), decoder.table_embeddings.numpy()),
        }
        for row, (pair, (src_ids, tgt_ids)) in enumerate(zip(chunk, encoded)):
            sentence = start + row
            aligned = {
                "encoder": [(i, src_ids[i], pair.src_tags[i].value) for i in range(len(src_ids))],
                "decoder": [(i + 1, tgt_ids[i], pair.tgt_tags[i].value) for i in range(len(tgt_ids))],
            }
            for side in SIDES:
                states, table = stacks[side]
                for position, token, tag in aligned[side]:
                    side_rows = rows[side]
                    side_rows["states"].append(states[row, position])
                    side_rows["embeddings"].append(table[row, position])
                    side_rows["token_ids"].append(token)
                    side_rows["tags"].append(tag)
                    side_rows["freq_ranks"].append(vocab.frequency_rank(token))
                    side_rows["sentence_ids"].append(sentence)
                    side_rows["positions"].append(position)
                    side_rows["unk"].append(token == UNK_ID)
                    unknown += token == UNK_ID
    if unknown:
        logger.warning(f"{unknown} dumped position(s) hold out-of-vocabulary tokens (flagged in the index)")
    return StateDump({side: _collect(rows[side]) for side in SIDES})


def sentence_split(sentence_ids: np.ndarray, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean train/test masks over positions; whole sentences go to one side."""
    sentences = np.unique(sentence_ids)
    if sentences.size < 2:
        raise DataError("probing needs at least two sentences for a train/test split")
    order = Rng(seed).split("probe.split").permutation(sentences.size)
    n_test = min(max(1, int(round(sentences.size * test_fraction))), sentences.size - 1)
    test_sentences = sentences[order[:n_test]]
    test = np.isin(sentence_ids, test_sentences)
    return ~test, test


@dataclass
class ProbeResult:
    side: str
    layer: int
    classifier: ProbeClassifier
    accuracy: float
    train_accuracy: float
    test_mask: np.ndarray
    correct: np.ndarray
    epochs_run: int


def train_probe(
    dump: SideDump,
    layer: int,
    config: ProbeConfig,
    n_classes: int,
    side: str = "encoder",
) -> ProbeResult:
    """
    Train a probe to recover the token id from layer `layer` states and
    report held-out accuracy. Stops early once the epoch training loss has not
    improved by `min_delta` for `patience` epochs.
    """
    labels = dump.token_ids
    if np.unique(labels).size < 2:
        raise DataError("probing needs at least two distinct tokens")
    states = dump.layer(layer).astype(np.float32)
    train_mask, test_mask = sentence_split(dump.sentence_ids, config.test_fraction, config.seed)
    x_train, y_train = states[train_mask], labels[train_mask]

    rng = Rng(config.seed).split(f"probe.{side}.{layer}")
    probe = ProbeClassifier(states.shape[1], config.hidden_units, n_classes, rng.split("init"), config.dropout)
    params = probe.parameters()
    adam = AdamState(0.9, 0.999, 1e-8)

    best, stale, epochs_run = np.inf, 0, 0
    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        order = rng.split(f"shuffle.{epoch}").permutation(x_train.shape[0])
        total, count = 0.0, 0
        for batch_index, start in enumerate(range(0, order.size, config.batch_size)):
            rows = order[start:start + config.batch_size]
            keep = np.ones(rows.size, dtype=bool)
            for param in params.values():
                param.grad = None
            with Tape() as tape:
                logits = probe(Tensor(x_train[rows], dtype=np.float32), rng.split(f"dropout.{epoch}.{batch_index}"))
                loss = cross_entropy(logits, y_train[rows], keep)
            tape.backward(loss)
            adam_step(params, {n: p.grad for n, p in params.items()}, adam, config.lr)
            total += loss.item() * rows.size
            count += rows.size
        epoch_loss = total / count
        if epoch_loss < best - config.min_delta:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Probe {side} layer {layer}: loss plateaued after {epochs_run} epochs")
                break

    correct = probe.predict(states[test_mask]) == labels[test_mask]
    train_correct = probe.predict(x_train) == y_train
    accuracy = float(correct.mean())
    logger.info(f"Probe {side} layer {layer}: test accuracy {accuracy:.4f} on {correct.size} positions")
    return ProbeResult(side, layer, probe, accuracy, float(train_correct.mean()), test_mask, correct, epochs_run)


def cosine_profile(dump: StateDump) -> List[LayerCosine]:
    """Mean cos(E, H_l) per side and layer; zero-norm positions are skipped and counted."""
    rows = []
    for side, data in dump.sides.items():
        e = data.embeddings.astype(np.float64)
        e_norm = np.linalg.norm(e, axis=-1)
        for layer in range(data.n_layers + 1):
            h = data.layer(layer).astype(np.float64)
            h_norm = np.linalg.norm(h, axis=-1)
            valid = (e_norm > 0) & (h_norm > 0)
            skipped = int((~valid).sum())
            if skipped:
                logger.warning(f"{side} layer {layer}: {skipped} zero-norm position(s) skipped")
            if not valid.any():
                rows.append(LayerCosine(side=side, layer=layer, cosine=float("nan"), positions=0, skipped=skipped))
                continue
            cos = (e[valid] * h[valid]).sum(axis=-1) / (e_norm[valid] * h_norm[valid])
            rows.append(LayerCosine(side=side, layer=layer, cosine=float(cos.mean()), positions=int(valid.sum()), skipped=skipped))
    return rows


def frequency_bins(token_ids: np.ndarray, counts: np.ndarray, n_bins: int) -> Tuple[List[np.ndarray], int]:
    """
    Partition positions into equal-sized bins (sizes differ by at most one),
    bin 1 holding the least frequent tokens. Returns (bins, bins used); fewer
    distinct tokens than bins reduces the bin count.
    """
    distinct = np.unique(token_ids).size
    used = min(n_bins, distinct) if distinct else 0
    if used == 0:
        return [], 0
    order = np.lexsort((np.arange(token_ids.size), token_ids, counts))
    return np.array_split(order, used), used


def conditioned_accuracy(
    dump: SideDump,
    result: ProbeResult,
    condition: Condition,
    vocab: Optional[Vocabulary] = None,
    n_bins: int = 10,
) -> Tuple[List[ConditionedRow], List[str]]:
    """Held-out probe accuracy per frequency bin or per tag; returns (rows, notes)."""
    notes: List[str] = []
    correct = result.correct
    tokens = dump.token_ids[result.test_mask]
    rows: List[ConditionedRow] = []
    if condition is Condition.FREQUENCY:
        if vocab is not None:
            counts = np.array([vocab.count(int(t)) for t in tokens])
        else:
            counts = -dump.freq_ranks[result.test_mask]
        bins, used = frequency_bins(tokens, counts, n_bins)
        if used < n_bins:
            note = f"{result.side} layer {result.layer}: only {used} distinct tokens, using {used} frequency bins"
            logger.warning(note)
            notes.append(note)
        for number, members in enumerate(bins, start=1):
            if members.size == 0:
                continue
            rows.append(ConditionedRow(side=result.side, layer=result.layer, condition=condition, group=str(number),
                                       accuracy=float(correct[members].mean()), positions=int(members.size)))
    else:
        tags = np.array(dump.tags)[result.test_mask]
        for tag in sorted(set(tags.tolist())):
            members = tags == tag
            rows.append(ConditionedRow(side=result.side, layer=result.layer, condition=condition, group=tag,
                                       accuracy=float(correct[members].mean()), positions=int(members.sum())))
    return rows, notes


def gate_stats(model: Transformer, pairs: Sequence[SentencePair], vocab: Vocabulary, batch_size: int = 32) -> List[GateStat]:
    """Mean/std of r^K and r^V over non-padding key positions, per layer and per head."""
    if model.variant is ShortcutVariant.NONE:
        raise ConfigError("gate statistics need a shortcut variant; this model is the vanilla transformer")
    if model.config.gateless_shortcuts:
        raise ConfigError("gate statistics are undefined for gate-less shortcuts")
    if not pairs:
        raise DataError("cannot collect gate statistics over an empty corpus")

    recorder = GateRecorder()
    model.recorder = recorder
    values: Dict[Tuple[str, str, int, str], List[np.ndarray]] = {}
    try:
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            batch = Batch.from_pairs([(vocab.encode(p.src), vocab.encode(p.tgt)) for p in chunk])
            recorder.clear()
            model.forward(batch.src, batch.tgt_in)
            for record in recorder.records:
                keep = record.keep if record.keep is not None else np.ones(record.r_key.shape[:2], dtype=bool)
                for gate_name, r in (("key", record.r_key), ("value", record.r_value)):
                    values.setdefault((record.side, record.kind, record.layer, gate_name), []).append(r[keep])
    finally:
        model.recorder = None

    heads, d_k = model.config.head_count, model.config.d_k
    stats = []
    for (side, kind, layer, gate_name), chunks in sorted(values.items()):
        r = np.concatenate(chunks, axis=0)
        stats.append(GateStat(side=side, kind=kind, layer=layer, head=None, gate=gate_name,
                              mean=float(r.mean()), std=float(r.std()), count=int(r.size)))
        per_head = r.reshape(r.shape[0], heads, d_k)
        for head in range(heads):
            values_h = per_head[:, head, :]
            stats.append(GateStat(side=side, kind=kind, layer=layer, head=head, gate=gate_name,
                                  mean=float(values_h.mean()), std=float(values_h.std()), count=int(values_h.size)))
    return stats


def run_probe_suite(
    model: Transformer,
    pairs: Sequence[SentencePair],
    vocab: Vocabulary,
    config: ProbeConfig,
    checkpoint: str = "",
    dump: Optional[StateDump] = None,
) -> Tuple[ProbeReport, StateDump]:
    """
    Full analysis: probes for every layer of both sides, cosine profile,
    frequency- and tag-conditioned accuracy and, for gated variants, gate
    statistics. Translation-model parameters are left untouched.
    """
    if config.max_sentences is not None:
        pairs = pairs[: config.max_sentences]
    before = parameter_checksum(model.state_dict())
    dump = dump or dump_states(model, pairs, vocab)
    report = ProbeReport(checkpoint=checkpoint, config_hash=model.config.hash(), variant=model.variant.value, seed=config.seed)

    for side in SIDES:
        data = dump[side]
        for layer in range(data.n_layers + 1):
            result = train_probe(data, layer, config, len(vocab), side)
            report.accuracy.append(LayerAccuracy(side=side, layer=layer, accuracy=result.accuracy,
                                                 train_accuracy=result.train_accuracy,
                                                 test_positions=int(result.correct.size), epochs_run=result.epochs_run))
            rows, notes = conditioned_accuracy(data, result, Condition.FREQUENCY, vocab, config.frequency_bins)
            report.frequency.extend(rows)
            report.notes.extend(notes)
            rows, _ = conditioned_accuracy(data, result, Condition.TAG)
            report.tags.extend(rows)
    report.cosine = cosine_profile(dump)

    if model.variant is ShortcutVariant.NONE or model.config.gateless_shortcuts:
        note = f"variant {model.variant.value} has no gates; gate statistics skipped"
        logger.info(note)
        report.notes.append(note)
    else:
        report.gates = gate_stats(model, pairs, vocab)

    if parameter_checksum(model.state_dict()) != before:
        raise DataError("probing modified translation-model parameters")
    return report, dump


def compare_reports(baseline: ProbeReport, shortcut: ProbeReport) -> List[Dict[str, float]]:
    """Per side and layer: shortcut accuracy minus baseline accuracy."""
    rows = []
    for side in SIDES:
        base = baseline.accuracy_by_layer(side)
        other = shortcut.accuracy_by_layer(side)
        for layer in sorted(set(base) & set(other)):
            rows.append({
                "side": side,
                "layer": layer,
                "baseline": base[layer],
                "shortcut": other[layer],
                "difference": other[layer] - base[layer],
            })
    return rows
