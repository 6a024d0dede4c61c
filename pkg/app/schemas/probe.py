from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class Condition(str, Enum):
    FREQUENCY = "frequency"
    TAG = "tag"


class ProbeConfig(BaseModel):
    """
    Lexical probing classifier: one hidden ReLU layer with dropout,
    softmax over the vocabulary, trained with Adam at a fixed rate.
    """
    model_config = ConfigDict(extra="forbid")

    hidden_units: int = Field(512, gt=0)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    epochs: int = Field(20, gt=0)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(256, gt=0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0, description="Held-out share of sentences")
    patience: int = Field(3, ge=1, description="Epochs without training-loss improvement before stopping")
    min_delta: float = Field(1e-4, ge=0.0)
    frequency_bins: int = Field(10, gt=0)
    max_sentences: Optional[int] = Field(None, gt=0, description="Cap on sentences dumped for probing")
    seed: int = 1


class LayerAccuracy(BaseModel):
    side: str
    layer: int
    accuracy: float
    train_accuracy: float
    test_positions: int
    epochs_run: int


class LayerCosine(BaseModel):
    side: str
    layer: int
    cosine: float
    positions: int
    skipped: int = 0


class ConditionedRow(BaseModel):
    side: str
    layer: int
    condition: Condition
    group: str = Field(..., description="Frequency bin (1 = least frequent) or tag name")
    accuracy: float
    positions: int


class GateStat(BaseModel):
    side: str
    kind: str
    layer: int
    head: Optional[int] = Field(None, description="None for statistics over all heads")
    gate: str = Field(..., description="'key' or 'value'")
    mean: float
    std: float
    count: int


class ProbeReport(BaseModel):
    """Everything one probing run produced; mirrored into CSV tables."""
    checkpoint: str
    config_hash: str
    variant: str
    seed: int
    accuracy: List[LayerAccuracy] = Field(default_factory=list)
    cosine: List[LayerCosine] = Field(default_factory=list)
    frequency: List[ConditionedRow] = Field(default_factory=list)
    tags: List[ConditionedRow] = Field(default_factory=list)
    gates: List[GateStat] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)

    def accuracy_by_layer(self, side: str) -> Dict[int, float]:
        return {row.layer: row.accuracy for row in self.accuracy if row.side == side}
