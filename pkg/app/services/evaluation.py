import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from sacrebleu.metrics import BLEU

from app.core.exceptions import DataError
from app.data.vocab import Vocabulary
from app.models.transformer import Transformer
from app.schemas.data import ContrastiveRecord
from app.services.decoding import score_pairs

logger = logging.getLogger(__name__)

# Corpora here are already tokenized; no smoothing at corpus level.
_corpus_bleu = BLEU(tokenize="none", smooth_method="none")
# Sentence-level diagnostics use add-one smoothing of the higher-order precisions.
_sentence_bleu = BLEU(tokenize="none", smooth_method="add-k", smooth_value=1.0, effective_order=True)


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus BLEU (0..100): 4-gram clipped precisions, geometric mean, brevity penalty."""
    score, _ = bleu_with_signature(hypotheses, references)
    return score


def bleu_with_signature(hypotheses: Sequence[str], references: Sequence[str]) -> Tuple[float, str]:
    if not hypotheses or not references:
        raise DataError("BLEU needs a non-empty corpus")
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    result = _corpus_bleu.corpus_score(list(hypotheses), [list(references)])
    return float(result.score), str(_corpus_bleu.get_signature())


def sentence_bleu(hypothesis: str, reference: str) -> float:
    """Add-one smoothed sentence BLEU; diagnostics only."""
    return float(_sentence_bleu.sentence_score(hypothesis, [reference]).score)


@dataclass
class ContrastiveResult:
    accuracy: float
    correct: int
    total: int
    excluded: int
    ties: int
    normalized: bool


def contrastive_score(
    model: Transformer,
    records: Sequence[ContrastiveRecord],
    vocab: Vocabulary,
    normalize: bool = False,
) -> ContrastiveResult:
    """
    A record counts as correct iff its correct target scores strictly higher
    than every incorrect one. Records without contrasts are excluded; ties
    count as incorrect.
    """
    usable = [r for r in records if r.incorrect]
    excluded = len(records) - len(usable)
    if excluded:
        logger.warning(f"{excluded} contrastive record(s) without incorrect targets excluded")
    if not usable:
        raise DataError("no contrastive record has an incorrect target")

    correct = ties = 0
    for record in usable:
        src = vocab.encode(record.source)
        targets = [record.correct] + list(record.incorrect)
        scores = score_pairs(model, [(src, vocab.encode(t)) for t in targets], normalize=normalize)
        best_wrong = max(scores[1:])
        if scores[0] > best_wrong:
            correct += 1
        elif scores[0] == best_wrong:
            ties += 1
    if ties:
        logger.warning(f"{ties} contrastive record(s) tied and were counted as incorrect")
    accuracy = correct / len(usable)
    logger.info(f"Contrastive accuracy {accuracy:.4f} over {len(usable)} records")
    return ContrastiveResult(accuracy, correct, len(usable), excluded, ties, normalize)


def sequence_accuracy(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    if not references:
        raise DataError("sequence accuracy needs at least one reference")
    return sum(h == r for h, r in zip(hypotheses, references)) / len(references)


def mean_sentence_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> Optional[float]:
    scores: List[float] = [sentence_bleu(h, r) for h, r in zip(hypotheses, references)]
    return sum(scores) / len(scores) if scores else None
