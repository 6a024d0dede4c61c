from enum import Enum
from typing import List

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Task(str, Enum):
    """Synthetic translation tasks."""
    COPY = "copy"
    REVERSE = "reverse"
    LEXICON = "lexicon"


class TokenTag(str, Enum):
    CONTENT = "content"
    FUNCTION = "function"
    TRIGGER = "trigger"
    AMBIGUOUS = "ambiguous"


class DataConfig(BaseModel):
    """
    Synthetic corpus generation settings.
    """
    model_config = ConfigDict(extra="forbid")

    task: Task = Task.COPY
    size: int = Field(2000, ge=3, description="Total unique sentence pairs over all splits")
    seed: int = 1
    content_words: int = Field(40, gt=0, description="Content word types on the source side")
    function_words: int = Field(6, ge=0)
    ambiguous_words: int = Field(8, ge=0, description="Ambiguous source words (lexicon task)")
    min_len: int = Field(3, gt=0)
    max_len: int = Field(10, gt=0)
    zipf_exponent: float = Field(1.0, ge=0.0)
    function_rate: float = Field(0.25, ge=0.0, le=1.0)
    ambiguous_rate: float = Field(0.7, ge=0.0, le=1.0, description="Share of sentences holding an ambiguous word")
    trigger_rate: float = Field(0.5, ge=0.0, le=1.0, description="Chance the trigger accompanies an ambiguous word")
    valid_fraction: float = Field(0.05, gt=0.0, lt=0.5)
    test_fraction: float = Field(0.05, gt=0.0, lt=0.5)
    bpe_merges: int = Field(0, ge=0, description="0 keeps the corpus word-level")
    bpe_threshold: int = Field(2, ge=1)
    path: str = Field("data", description="Corpus directory for training and evaluation")

    @model_validator(mode="after")
    def _check_lengths(self) -> "DataConfig":
        if self.min_len > self.max_len:
            raise ValueError(f"min_len={self.min_len} exceeds max_len={self.max_len}")
        if self.task is Task.LEXICON and self.ambiguous_words and self.min_len < 2:
            raise ValueError("the lexicon task needs min_len >= 2 to place a trigger")
        return self


class SentencePair(BaseModel):
    """Word-aligned parallel sentence with one tag per token on each side."""
    src: List[str]
    tgt: List[str]
    src_tags: List[TokenTag]
    tgt_tags: List[TokenTag]


class ContrastiveRecord(BaseModel):
    """Source with its correct translation and sense-perturbed alternatives."""
    source: str = Field(..., examples=["n3 g1 a1 f0"])
    correct: str = Field(..., examples=["n3' g1' a1'1 f0'"])
    incorrect: List[str] = Field(default_factory=list, examples=[["n3' g1' a1'2 f0'"]])
