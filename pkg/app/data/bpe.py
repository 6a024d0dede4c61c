"""
Byte-pair encoding over whitespace-tokenized text.

Merges are learned jointly over source and target lines. Words are split
into characters with an end-of-word marker on the last one; segmented
output marks every non-final unit with a trailing `@@`.
"""
import logging
from collections import Counter
from typing import Dict, Iterable, List, Sequence, Tuple

from app.core.exceptions import DataError

logger = logging.getLogger(__name__)

END_OF_WORD = "</w>"
CONTINUATION = "@@"

Pair = Tuple[str, str]


def _split_word(word: str) -> Tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


def _pair_counts(words: Dict[Tuple[str, ...], int]) -> Counter:
    pairs = Counter()
    for symbols, freq in words.items():
        for pair in zip(symbols, symbols[1:]):
            pairs[pair] += freq
    return pairs


def _merge_symbols(symbols: Sequence[str], pair: Pair) -> Tuple[str, ...]:
    merged, i = [], 0
    while i < len(symbols):
        if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
            merged.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


def learn_bpe(corpus: Iterable[str], n_merges: int, vocab_threshold: int = 2) -> List[Pair]:
    """
    Greedy merge learning: repeatedly merge the most frequent adjacent pair,
    smallest pair first on ties. Stops after `n_merges` merges or when the
    best pair occurs fewer than `vocab_threshold` times.
    """
    if n_merges < 0:
        raise DataError(f"n_merges must be >= 0, got {n_merges}")
    word_counts = Counter(word for line in corpus for word in line.split())
    if not word_counts:
        raise DataError("cannot learn BPE merges from an empty corpus")
    words = {_split_word(word): freq for word, freq in word_counts.items()}

    merges: List[Pair] = []
    while len(merges) < n_merges:
        pairs = _pair_counts(words)
        if not pairs:
            break
        best_freq = max(pairs.values())
        if best_freq < vocab_threshold:
            logger.info(f"BPE stopped after {len(merges)} merges: best pair frequency {best_freq} < {vocab_threshold}")
            break
        best = min(pair for pair, freq in pairs.items() if freq == best_freq)
        merges.append(best)
        words = {_merge_symbols(symbols, best): freq for symbols, freq in words.items()}
    logger.info(f"Learned {len(merges)} BPE merges over {len(word_counts)} word types")
    return merges


def segment_word(word: str, merges: Sequence[Pair], ranks: Dict[Pair, int] = None) -> List[str]:
    """Units of one word, end-of-word marker removed."""
    ranks = ranks if ranks is not None else {pair: i for i, pair in enumerate(merges)}
    symbols = _split_word(word)
    while len(symbols) > 1:
        candidates = [(ranks[pair], pair) for pair in zip(symbols, symbols[1:]) if pair in ranks]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_symbols(symbols, pair)
    last = symbols[-1][: -len(END_OF_WORD)]
    return list(symbols[:-1]) + ([last] if last else [])


def apply_bpe(line: str, merges: Sequence[Pair]) -> str:
    ranks = {pair: i for i, pair in enumerate(merges)}
    out = []
    for word in line.split():
        units = segment_word(word, merges, ranks)
        out.extend(f"{unit}{CONTINUATION}" for unit in units[:-1])
        out.append(units[-1])
    return " ".join(out)


def undo_bpe(line: str) -> str:
    return line.replace(f"{CONTINUATION} ", "").removesuffix(CONTINUATION)
