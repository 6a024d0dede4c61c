from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.data import DataConfig
from app.schemas.model import ModelConfig
from app.schemas.probe import ProbeConfig
from app.schemas.train import TrainConfig


class DecodeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beam_size: int = Field(16, ge=1)
    max_len: Optional[int] = Field(None, gt=0, description="Generated tokens incl. EOS; default source length + 10")
    len_penalty: float = Field(1.0, ge=0.0, description="Score = log-prob / length^len_penalty")
    contrastive_normalize: bool = Field(False, description="Length-normalize contrastive scores")


class RunConfig(BaseModel):
    """
    Composite configuration of one command. Loaded from JSON, patched with
    dotted overrides, then echoed into the run directory.
    """
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    scale: Literal["toy", "base"] = Field("toy", description="Selects default warm-up lengths")
    run_dir: Optional[str] = Field(None, description="Defaults to <LEXSHORT_RUNS_DIR>/<variant>")

    @property
    def warmup_steps(self) -> int:
        return self.train.resolved_warmup(self.model.variant, self.scale)
