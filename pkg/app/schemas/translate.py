from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field


class Hypothesis(BaseModel):
    tokens: List[int]
    text: str
    score: float = Field(..., description="Length-normalized log-probability")
    log_prob: float
    finished: bool = Field(True, description="False when max_len was hit before EOS")


class TranslateRequest(BaseModel):
    """
    Sentences to translate with the served checkpoint.
    """
    sentences: List[str] = Field(..., min_length=1, max_length=256, examples=[["n1 n4 n2"]])
    beam_size: int = Field(4, ge=1, le=64)
    max_len: Optional[int] = Field(None, gt=0)


class TranslateResponse(BaseModel):
    translations: List[str]
    hypotheses: List[Hypothesis]
    warnings: List[str] = Field(default_factory=list)


class ScorePair(BaseModel):
    source: str = Field(..., examples=["n1 g0 a0"])
    target: str = Field(..., examples=["n1' g0' a0'1"])


class ScoreRequest(BaseModel):
    pairs: List[ScorePair] = Field(..., min_length=1, max_length=256)
    normalize: bool = False


class ScoreResponse(BaseModel):
    scores: List[float]


class HealthResponse(BaseModel):
    status: str
    service: str
    model_loaded: bool
    variant: Optional[str] = None
    config_hash: Optional[str] = None


class EvaluationReport(BaseModel):
    """Report written by the evaluate command."""
    model_config = ConfigDict(protected_namespaces=())

    checkpoint: str
    config_hash: str
    seed: int
    variant: str
    step: int
    bleu: Optional[float] = None
    bleu_signature: Optional[str] = None
    sentences: int = 0
    unfinished: int = 0
    contrastive_accuracy: Optional[float] = None
    contrastive_records: int = 0
    contrastive_excluded: int = 0
    contrastive_ties: int = 0
    contrastive_normalized: bool = False
    sentence_bleu_mean: Optional[float] = Field(None, description="Mean add-one smoothed sentence BLEU (diagnostic)")
