from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.model import ShortcutVariant

# Warm-up lengths per variant; toy values keep the base ratio.
WARMUP_BY_SCALE: Dict[str, Dict[str, int]] = {
    "toy": {"baseline": 400, "lexical": 600, "fusion": 800},
    "base": {"baseline": 4000, "lexical": 6000, "fusion": 8000},
}
BIG_WARMUP = 16000


def _warmup_family(variant: ShortcutVariant) -> str:
    if variant is ShortcutVariant.FUSION:
        return "fusion"
    if variant is ShortcutVariant.NONE:
        return "baseline"
    return "lexical"


class TrainConfig(BaseModel):
    """
    Optimization schedule and bookkeeping of one training run.
    `warmup_steps=None` picks the default for the model variant.
    """
    model_config = ConfigDict(extra="forbid")

    warmup_steps: Optional[int] = Field(None, ge=1)
    total_steps: int = Field(3000, ge=0, description="Optimizer steps (not micro-batches)")
    accumulation_factor: int = Field(1, ge=1, description="Micro-batches per optimizer step")
    batch_tokens: int = Field(1024, gt=0, description="Upper bound of source+target tokens per micro-batch")
    lr_scale: float = Field(1.0, gt=0.0, description="Multiplier on the warm-up schedule")
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.98, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-9, gt=0.0)
    checkpoint_every: int = Field(250, gt=0)
    validate_every: int = Field(250, gt=0)
    log_every: int = Field(50, gt=0)
    average_last_k: int = Field(5, ge=1)
    keep_checkpoints: int = Field(0, ge=0, description="0 keeps every checkpoint")
    queue_size: int = Field(8, gt=0, description="Bounded queue between batch producer and trainer")
    seed: int = 1

    def resolved_warmup(self, variant: ShortcutVariant, scale: Literal["toy", "base"] = "toy") -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return WARMUP_BY_SCALE[scale][_warmup_family(variant)]

    @classmethod
    def for_variant(cls, variant: ShortcutVariant, scale: Literal["toy", "base", "big"] = "toy",
                    **overrides: Any) -> "TrainConfig":
        if scale == "big":
            defaults: Dict[str, Any] = {"warmup_steps": BIG_WARMUP, "average_last_k": 16}
        else:
            defaults = {"warmup_steps": WARMUP_BY_SCALE[scale][_warmup_family(variant)]}
        if scale != "toy":
            defaults.update({"checkpoint_every": 4000, "validate_every": 4000, "batch_tokens": 4096})
        return cls(**{**defaults, **overrides})
