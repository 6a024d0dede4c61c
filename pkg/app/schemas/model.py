from enum import Enum
from typing import Any, Dict, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.utils.hashing import config_hash


class ShortcutVariant(str, Enum):
    """
    Shortcut configurations:
    - NONE: vanilla transformer
    - LEXICAL: gated shortcuts from the embedding layer into self-attention keys/values
    - FUSION: lexical shortcuts with feature-fusion (joint projection of [E; H])
    - NONLEXICAL: gated shortcuts from layer l-2 instead of the embeddings
    - DEC2ENC: gated source-embedding shortcuts into decoder-to-encoder attention only
    - DEC2ENC_SELF: DEC2ENC plus self-attention lexical shortcuts
    """
    NONE = "none"
    LEXICAL = "lexical"
    FUSION = "fusion"
    NONLEXICAL = "nonlexical"
    DEC2ENC = "dec2enc"
    DEC2ENC_SELF = "dec2enc+self"

    @property
    def self_attention(self) -> bool:
        return self in (ShortcutVariant.LEXICAL, ShortcutVariant.FUSION,
                        ShortcutVariant.NONLEXICAL, ShortcutVariant.DEC2ENC_SELF)

    @property
    def cross_attention(self) -> bool:
        return self in (ShortcutVariant.DEC2ENC, ShortcutVariant.DEC2ENC_SELF)

    @property
    def fused(self) -> bool:
        return self is ShortcutVariant.FUSION


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters of the encoder-decoder.
    Defaults are the toy desk-scale model; small, base and big presets give the full-size shapes.
    """
    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    n_layers: int = Field(3, ge=0, description="Encoder and decoder depth")
    d_model: int = Field(64, gt=0)
    head_count: int = Field(4, gt=0)
    d_ff: int = Field(256, gt=0)
    vocab_size: int = Field(64, ge=5, description="Shared source/target vocabulary incl. reserved ids")
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    variant: ShortcutVariant = ShortcutVariant.NONE
    shortcut_encoder: bool = Field(True, description="Enable shortcuts in the encoder")
    shortcut_decoder: bool = Field(True, description="Enable shortcuts in the decoder")
    tie_embeddings: bool = True
    max_len: int = Field(64, gt=0)
    seed: int = 1
    label_smoothing: float = Field(0.0, ge=0.0, lt=1.0)
    positional_encoding: bool = True
    shortcut_pre_positional: bool = Field(
        False, description="Feed shortcuts the scaled table embedding without positions"
    )
    gateless_shortcuts: bool = Field(
        False, description="Ungated residual shortcuts; reproduces the reported non-convergence only"
    )
    gate_bias_init: float = 0.0
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.d_model % self.head_count:
            raise ValueError(f"d_model={self.d_model} is not divisible by head_count={self.head_count}")
        if self.gateless_shortcuts and self.variant is ShortcutVariant.NONE:
            raise ValueError("gateless_shortcuts needs a shortcut variant")
        return self

    @property
    def d_k(self) -> int:
        return self.d_model // self.head_count

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def shortcuts_in(self, side: str) -> bool:
        """Whether self-attention shortcuts are active in `side` ('encoder' or 'decoder')."""
        enabled = self.shortcut_encoder if side == "encoder" else self.shortcut_decoder
        return self.variant.self_attention and enabled

    def cross_shortcuts(self) -> bool:
        return self.variant.cross_attention and self.shortcut_decoder

    def hash(self) -> str:
        return config_hash(self.model_dump(mode="json"))

    @classmethod
    def toy(cls, **overrides: Any) -> "ModelConfig":
        return cls(**{"n_layers": 3, "d_model": 64, "head_count": 4, "d_ff": 256, **overrides})

    @classmethod
    def small(cls, **overrides: Any) -> "ModelConfig":
        return cls(**{"n_layers": 6, "d_model": 256, "head_count": 8, "d_ff": 1024, "max_len": 256, **overrides})

    @classmethod
    def base(cls, **overrides: Any) -> "ModelConfig":
        return cls(**{"n_layers": 6, "d_model": 512, "head_count": 8, "d_ff": 2048, "max_len": 256, **overrides})

    @classmethod
    def big(cls, **overrides: Any) -> "ModelConfig":
        return cls(**{"n_layers": 6, "d_model": 1024, "head_count": 16, "d_ff": 4096, "max_len": 256, **overrides})

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "ModelConfig":
        presets: Dict[str, Any] = {"toy": cls.toy, "small": cls.small, "base": cls.base, "big": cls.big}
        return presets[name](**overrides)
