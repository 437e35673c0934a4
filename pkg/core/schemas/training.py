from __future__ import annotations

from typing import Any, Literal

from pydantic import Field, model_validator

from core.schemas.base import CamelModel
from core.schemas.osdnet import EmbeddingConfig, NetConfig

CHECKPOINT_FORMAT_VERSION = 1


class HistogramSchema(CamelModel):
    bin_edges: list[float]
    counts: list[int]

    @model_validator(mode="after")
    def _check_edges(self) -> HistogramSchema:
        if len(self.bin_edges) != len(self.counts) + 1:
            raise ValueError("a histogram needs one more edge than bins")
        return self

    @property
    def total(self) -> int:
        return sum(self.counts)


class OffNormStats(CamelModel):
    mean: float
    std: float
    count: int
    histogram: HistogramSchema

    @model_validator(mode="after")
    def _mass_matches_count(self) -> OffNormStats:
        if self.histogram.total != self.count:
            raise ValueError("histogram mass must equal the sample count")
        return self


class CheckpointMetrics(CamelModel):
    epoch: int = Field(ge=0)
    loss: float
    off_norms: OffNormStats | None = None
    mse_to_optimal: float | None = None
    nearest_data_distance: float | None = None


class ArrayPayload(CamelModel):
    shape: list[int]
    data: list[float]

    @model_validator(mode="after")
    def _size_matches(self) -> ArrayPayload:
        size = 1
        for extent in self.shape:
            size *= extent
        if size != len(self.data):
            raise ValueError("array data does not match its shape")
        return self


class OptimizerStatePayload(CamelModel):
    kind: Literal["sgd", "adamw"]
    step: int = Field(ge=0)
    first_moment: dict[str, ArrayPayload] = Field(default_factory=dict)
    second_moment: dict[str, ArrayPayload] = Field(default_factory=dict)


class RngPayload(CamelModel):
    seed: int = Field(ge=0)
    stream_id: int = Field(ge=0)


class CheckpointFile(CamelModel):
    format_version: int
    mode: Literal["offsubspace", "subspace"]
    epoch: int = Field(ge=0)
    rng: RngPayload
    embedding: EmbeddingConfig
    net: NetConfig | None = None
    train: dict[str, Any]
    params: dict[str, ArrayPayload]
    optimizer: OptimizerStatePayload
    initial_loss: float | None = None
    metrics: list[CheckpointMetrics] = Field(default_factory=list)
    # set when the step after this state was rejected (non-finite gradient or divergence)
    aborted: str | None = None
