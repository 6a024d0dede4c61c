"""
Greedy and beam-search decoding over the incremental decoder cache, plus
teacher-forced sequence scoring.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError, DataError
from app.data.vocab import BOS_ID, EOS_ID, PAD_ID
from app.models.state import Batch, pad_rows
from app.models.transformer import Transformer
from app.schemas.translate import Hypothesis

logger = logging.getLogger(__name__)

# Never generated: padding and sentence start.
BLOCKED_IDS = (PAD_ID, BOS_ID)


def _log_probs(logits: np.ndarray) -> np.ndarray:
    logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp[..., list(BLOCKED_IDS)] = -np.inf
    return logp


def default_max_len(model: Transformer, src_len: int) -> int:
    return min(src_len + 10, model.config.max_len)


def length_normalize(log_prob: float, length: int, len_penalty: float) -> float:
    return log_prob / (max(length, 1) ** len_penalty)


def _encode_sources(model: Transformer, sources: Sequence[Sequence[int]]):
    if not sources:
        raise DataError("nothing to decode")
    for index, src in enumerate(sources):
        if len(src) == 0:
            raise DataError(f"empty source sentence at position {index}")
    return model.encode(pad_rows([list(src) + [EOS_ID] for src in sources]))


def greedy_decode(model: Transformer, sources: Sequence[Sequence[int]], max_len: Optional[int] = None) -> List[Hypothesis]:
    """Argmax decoding of a batch of sources; stops per row at EOS or after `max_len` tokens."""
    encoder = _encode_sources(model, sources)
    cache = model.start_decoding(encoder)
    rows = len(sources)
    limit = max_len or max(default_max_len(model, len(src)) for src in sources)
    tokens = [[] for _ in range(rows)]
    log_prob = np.zeros(rows)
    done = np.zeros(rows, dtype=bool)
    last = np.full(rows, BOS_ID, dtype=np.int64)
    for _ in range(min(limit, model.config.max_len)):
        logp = _log_probs(model.decode_step(last, cache).numpy())
        choice = logp.argmax(axis=-1)
        for row in np.flatnonzero(~done):
            tokens[row].append(int(choice[row]))
            log_prob[row] += logp[row, choice[row]]
            done[row] = choice[row] == EOS_ID
        last = np.where(done, PAD_ID, choice)
        if done.all():
            break

    hypotheses = []
    for row in range(rows):
        finished = bool(done[row])
        body = tokens[row][:-1] if finished else tokens[row]
        score = length_normalize(float(log_prob[row]), len(tokens[row]), 1.0)
        hypotheses.append(Hypothesis(tokens=body, text="", score=score, log_prob=float(log_prob[row]), finished=finished))
    return hypotheses


def beam_search(
    model: Transformer,
    src: Sequence[int],
    beam_size: int = 16,
    max_len: Optional[int] = None,
    len_penalty: float = 1.0,
) -> Hypothesis:
    """
    Beam search for one source sentence.

    Each step keeps the best `beam_size - finished` extensions over all live
    beams; extensions ending in EOS are set aside as finished, shrinking the
    beam. Hypotheses are ranked by log-prob / length^len_penalty, where length
    counts generated tokens including EOS. Ties go to the lower (beam, token)
    index. If nothing finishes within `max_len`, the best unfinished
    hypothesis is returned with `finished=False`.
    """
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    limit = min(max_len or default_max_len(model, len(src)), model.config.max_len)
    cache = model.start_decoding(_encode_sources(model, [src]))

    live: List[Tuple[List[int], float]] = [([], 0.0)]
    finished: List[Tuple[float, List[int], float]] = []
    for _ in range(limit):
        width = beam_size - len(finished)
        if width <= 0 or not live:
            break
        last = np.array([seq[-1] if seq else BOS_ID for seq, _ in live], dtype=np.int64)
        logp = _log_probs(model.decode_step(last, cache).numpy())
        totals = np.array([score for _, score in live])[:, None] + logp
        flat = totals.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        order = [i for i in order[:width] if np.isfinite(flat[i])]

        vocab = logp.shape[-1]
        next_live, rows = [], []
        for index in order:
            beam, token = divmod(int(index), vocab)
            sequence = live[beam][0] + [token]
            if token == EOS_ID:
                finished.append((length_normalize(float(flat[index]), len(sequence), len_penalty), sequence, float(flat[index])))
            else:
                next_live.append((sequence, float(flat[index])))
                rows.append(beam)
        live = next_live
        if live:
            cache = cache.select(rows)

    if finished:
        score, sequence, log_prob = max(finished, key=lambda item: item[0])
        return Hypothesis(tokens=sequence[:-1], text="", score=score, log_prob=log_prob, finished=True)

    ranked = [(length_normalize(lp, len(seq), len_penalty), seq, lp) for seq, lp in live]
    score, sequence, log_prob = max(ranked, key=lambda item: item[0])
    logger.warning(f"No hypothesis reached EOS within {limit} tokens; returning the best unfinished one")
    return Hypothesis(tokens=sequence, text="", score=score, log_prob=log_prob, finished=False)


def score_pairs(
    model: Transformer,
    pairs: Sequence[Tuple[Sequence[int], Sequence[int]]],
    normalize: bool = False,
) -> List[float]:
    """
    Teacher-forced log-probability of each target (plus EOS) given its source;
    divided by the target length incl. EOS when `normalize`.
    """
    batch = Batch.from_pairs(pairs)
    logits = model.forward(batch.src, batch.tgt_in).numpy().astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, batch.tgt_out[..., None], axis=-1)[..., 0]
    keep = batch.tgt_keep
    totals = (picked * keep).sum(axis=1)
    if normalize:
        totals = totals / keep.sum(axis=1)
    return [float(t) for t in totals]


def incremental_log_prob(model: Transformer, src: Sequence[int], tgt: Sequence[int]) -> float:
    """Same quantity as `score_pairs` for one pair, accumulated step by step through the decoder cache."""
    cache = model.start_decoding(_encode_sources(model, [src]))
    total, previous = 0.0, BOS_ID
    for token in list(tgt) + [EOS_ID]:
        logits = model.decode_step(np.array([previous]), cache).numpy().astype(np.float64)[0]
        shifted = logits - logits.max()
        total += float(shifted[token] - np.log(np.exp(shifted).sum()))
        previous = token
    return total
