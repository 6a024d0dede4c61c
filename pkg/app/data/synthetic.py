"""
Synthetic parallel corpora standing in for real bitext.

copy     source and target are the same content-word sequence
reverse  target is the source reversed
lexicon  word-for-word translation `x -> x'`, except ambiguous words `a<i>`,
         which translate to sense 1 (`a<i>'1`) when their trigger `g<i>` occurs
         anywhere in the sentence and to sense 2 (`a<i>'2`) otherwise
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import DataError
from app.core.rng import Rng
from app.data.bpe import apply_bpe, segment_word
from app.schemas.data import ContrastiveRecord, DataConfig, SentencePair, Task, TokenTag

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


def content_word(i: int) -> str:
    return f"n{i}"


def function_word(i: int) -> str:
    return f"f{i}"


def ambiguous_word(i: int) -> str:
    return f"a{i}"


def trigger_word(i: int) -> str:
    return f"g{i}"


def sense_word(i: int, sense: int) -> str:
    return f"{ambiguous_word(i)}'{sense}"


def translate_word(word: str) -> str:
    return f"{word}'"


def zipf_probabilities(n: int, exponent: float) -> np.ndarray:
    weights = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), exponent)
    return weights / weights.sum()


@dataclass
class ParallelCorpus:
    task: Task
    splits: Dict[str, List[SentencePair]] = field(default_factory=dict)

    def sizes(self) -> Dict[str, int]:
        return {name: len(pairs) for name, pairs in self.splits.items()}


class _Generator:
    def __init__(self, config: DataConfig, rng: Rng):
        self.config = config
        self.rng = rng
        self.content_p = zipf_probabilities(config.content_words, config.zipf_exponent)

    def _filler(self, allow_function: bool) -> Tuple[str, TokenTag]:
        cfg = self.config
        if allow_function and cfg.function_words and self.rng.random(1)[0] < cfg.function_rate:
            return function_word(self.rng.choice(cfg.function_words)), TokenTag.FUNCTION
        return content_word(self.rng.choice(cfg.content_words, p=self.content_p)), TokenTag.CONTENT

    def sentence(self) -> SentencePair:
        cfg = self.config
        length = int(self.rng.integers(cfg.min_len, cfg.max_len + 1))
        lexicon = cfg.task is Task.LEXICON
        words, tags = zip(*(self._filler(lexicon) for _ in range(length)))
        words, tags = list(words), list(tags)

        if cfg.task is Task.COPY:
            return SentencePair(src=words, tgt=list(words), src_tags=tags, tgt_tags=list(tags))
        if cfg.task is Task.REVERSE:
            return SentencePair(src=words, tgt=words[::-1], src_tags=tags, tgt_tags=tags[::-1])

        if cfg.ambiguous_words and self.rng.random(1)[0] < cfg.ambiguous_rate:
            index = self.rng.choice(cfg.ambiguous_words)
            position = int(self.rng.integers(0, length))
            words[position], tags[position] = ambiguous_word(index), TokenTag.AMBIGUOUS
            if self.rng.random(1)[0] < cfg.trigger_rate:
                others = [p for p in range(length) if p != position]
                trigger_at = others[int(self.rng.integers(0, len(others)))]
                words[trigger_at], tags[trigger_at] = trigger_word(index), TokenTag.TRIGGER
        return SentencePair(src=words, tgt=translate_lexicon(words), src_tags=tags, tgt_tags=list(tags))


def translate_lexicon(words: Sequence[str]) -> List[str]:
    """Gold lexicon-task translation of a source word sequence."""
    present = set(words)
    out = []
    for word in words:
        if word.startswith("a") and word[1:].isdigit():
            index = int(word[1:])
            out.append(sense_word(index, 1 if trigger_word(index) in present else 2))
        else:
            out.append(translate_word(word))
    return out


def split_sizes(size: int, valid_fraction: float, test_fraction: float) -> Tuple[int, int, int]:
    n_valid = max(1, int(round(size * valid_fraction)))
    n_test = max(1, int(round(size * test_fraction)))
    n_train = size - n_valid - n_test
    if n_train < 1:
        raise DataError(f"corpus size {size} is below the minimum of one sentence per split")
    return n_train, n_valid, n_test


def gen_corpus(config: DataConfig, task: Optional[Task] = None, size: Optional[int] = None,
               seed: Optional[int] = None) -> ParallelCorpus:
    """
    Deterministic corpus of unique sentence pairs, split train/valid/test.
    Arguments other than `config` override the matching config fields.
    """
    updates = {k: v for k, v in {"task": task, "size": size, "seed": seed}.items() if v is not None}
    config = config.model_copy(update=updates) if updates else config
    sizes = split_sizes(config.size, config.valid_fraction, config.test_fraction)

    generator = _Generator(config, Rng(config.seed).split(f"corpus.{config.task.value}"))
    seen, pairs = set(), []
    attempts, limit = 0, config.size * 50 + 1000
    while len(pairs) < config.size:
        attempts += 1
        if attempts > limit:
            raise DataError(
                f"could only draw {len(pairs)} unique sentences of {config.size}; "
                f"enlarge the vocabulary or sentence lengths"
            )
        pair = generator.sentence()
        key = tuple(pair.src)
        if key in seen:
            continue
        seen.add(key)
        pairs.append(pair)

    corpus = ParallelCorpus(config.task)
    start = 0
    for name, count in zip(SPLITS, sizes):
        corpus.splits[name] = pairs[start:start + count]
        start += count
    logger.info(f"Generated {config.task.value} corpus with seed {config.seed}: {corpus.sizes()}")
    return corpus


def contrastive_records(pairs: Sequence[SentencePair]) -> List[ContrastiveRecord]:
    """One record per sentence holding an ambiguous word; each sense flip is one contrast."""
    records = []
    for pair in pairs:
        incorrect = []
        for position, word in enumerate(pair.tgt):
            if pair.tgt_tags[position] is not TokenTag.AMBIGUOUS:
                continue
            stem, sense = word.rsplit("'", 1)
            flipped = list(pair.tgt)
            flipped[position] = f"{stem}'{2 if sense == '1' else 1}"
            incorrect.append(" ".join(flipped))
        if incorrect:
            records.append(ContrastiveRecord(source=" ".join(pair.src), correct=" ".join(pair.tgt), incorrect=incorrect))
    return records


def segment_pair(pair: SentencePair, merges: Sequence[Tuple[str, str]]) -> SentencePair:
    """BPE-segment both sides; every subword inherits the tag of its word."""
    ranks = {p: i for i, p in enumerate(merges)}

    def side(words: List[str], tags: List[TokenTag]):
        units, unit_tags = [], []
        for word, tag in zip(words, tags):
            pieces = segment_word(word, merges, ranks)
            units.extend([f"{piece}@@" for piece in pieces[:-1]] + [pieces[-1]])
            unit_tags.extend([tag] * len(pieces))
        return units, unit_tags

    src, src_tags = side(pair.src, pair.src_tags)
    tgt, tgt_tags = side(pair.tgt, pair.tgt_tags)
    return SentencePair(src=src, tgt=tgt, src_tags=src_tags, tgt_tags=tgt_tags)


def segment_record(record: ContrastiveRecord, merges: Sequence[Tuple[str, str]]) -> ContrastiveRecord:
    return ContrastiveRecord(
        source=apply_bpe(record.source, merges),
        correct=apply_bpe(record.correct, merges),
        incorrect=[apply_bpe(line, merges) for line in record.incorrect],
    )
