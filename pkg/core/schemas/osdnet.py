from __future__ import annotations

from typing import Literal

from pydantic import ConfigDict, Field, field_validator

from core.schemas.base import ConfigSection

Activation = Literal["silu", "tanh", "softplus"]


class EmbeddingConfig(ConfigSection):
    """Sinusoidal time embedding: entries sin/cos(s·t / ℓ^{2k/dim})."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    scale: float = Field(default=1000.0, gt=0)
    wavelength: float = Field(default=10000.0, gt=1)
    dim: int = Field(default=256, ge=2)

    @field_validator("dim")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("embedding dim must be even")
        return value


class NetConfig(ConfigSection):
    """Layout of the residual subspace network ŝ."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden: int = Field(default=256, ge=1)
    blocks: int = Field(default=2, ge=0)
    activation: Activation = "silu"
    embedding: EmbeddingConfig = EmbeddingConfig()
