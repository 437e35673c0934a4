from __future__ import annotations

import math
from typing import Literal

from pydantic import Field, field_validator, model_validator

from core.schemas.base import ConfigSection
from core.schemas.osdnet import EmbeddingConfig, NetConfig

DatasetMode = Literal["sparse", "hierarchical", "subspace", "file"]
GridKind = Literal["uniform", "geometric"]
Method = Literal["euler", "rk4"]
OptimizerKind = Literal["sgd", "adamw"]
TrainMode = Literal["offsubspace", "subspace"]
VerifyScale = Literal["quick", "full"]

# RngSpec stream ids; one per consumer so that sections never share draws.
STREAM_DATA = 0
STREAM_STARTS = 1
STREAM_BOUND_CHECK = 2
STREAM_OFFSUBSPACE = 3
STREAM_SUBSPACE = 4
STREAM_VERIFY = 5
STREAM_DISTILL = 6

_QUADRANT_CENTERS = [[-2.0, 2.0], [-2.0, -2.0], [2.0, 2.0], [2.0, -2.0]]


class DataConfig(ConfigSection):
    mode: DatasetMode = "sparse"
    path: str | None = None
    format: Literal["csv", "json"] | None = None
    d: int = Field(default=2, ge=1)
    n_points: int = Field(default=6, ge=1)
    box: float = Field(default=10.0, gt=0)
    min_separation: float = Field(default=5.0, ge=0)
    subspace_dim: int | None = Field(default=None, ge=1)
    centers: list[list[float]] = Field(default_factory=lambda: [list(c) for c in _QUADRANT_CENTERS])
    cluster_size: int = Field(default=30, ge=1)
    cluster_std: float = Field(default=0.5, gt=0)
    rank_tol: float = Field(default=1e-10, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_mode(self) -> DataConfig:
        if self.mode == "file" and not self.path:
            raise ValueError("data.path is required when data.mode = 'file'")
        if self.subspace_dim is not None and self.subspace_dim > self.d:
            raise ValueError("data.subspace_dim cannot exceed data.d")
        if self.mode == "hierarchical" and len({len(c) for c in self.centers}) != 1:
            raise ValueError("cluster centers must share one dimension")
        return self


class PathsConfig(ConfigSection):
    schedule: Literal["ot", "vp"] = "ot"
    beta0: float = Field(default=1.0, gt=0)


class DynamicsConfig(ConfigSection):
    grid: GridKind = "uniform"
    steps: int = Field(default=100, ge=1)
    epsilon: float = Field(default=1e-4, gt=0, lt=1)
    method: Method = "rk4"
    snap_tol: float = Field(default=1e-6, ge=0)
    trajectories: int = Field(default=64, ge=1)
    snapshot_times: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    snapshot_samples: int = Field(default=1000, ge=1)

    @field_validator("snapshot_times")
    @classmethod
    def _in_unit_interval(cls, value: list[float]) -> list[float]:
        if any(not 0.0 <= t < 1.0 for t in value):
            raise ValueError("snapshot times must lie in [0, 1)")
        return sorted(value)


class GeometryConfig(ConfigSection):
    fw_tol: float = Field(default=1e-7, gt=0)
    fw_max_iter: int = Field(default=10_000, ge=1)
    bisection_tol: float = Field(default=1e-4, gt=0, lt=1)
    max_generators: int = Field(default=100_000, ge=1)
    source_radius: float | None = Field(default=None, gt=0)
    source_vertices: int = Field(default=64, ge=3)
    membership_tol: float = Field(default=1e-6, gt=0)
    confinement_trajectories: int = Field(default=500, ge=1)
    confinement_margin: float = Field(default=0.01, ge=0)

    def radius_for(self, d: int) -> float:
        """Radius of the ball standing in for the Gaussian source in ℝᵈ."""
        return self.source_radius if self.source_radius is not None else math.sqrt(d) + 3.0


class OsdnetConfig(ConfigSection):
    embedding: EmbeddingConfig = EmbeddingConfig()
    net: NetConfig = NetConfig()
    panels: int = Field(default=2048, ge=1)
    loss_epsilon: float = Field(default=1e-3, gt=0, lt=1)


class TrainConfig(ConfigSection):
    optimizer: OptimizerKind
    learning_rate: float = Field(gt=0)
    epochs: int = Field(ge=1)
    batch: int = Field(default=1024, ge=1)
    checkpoint_every: int = Field(ge=1)
    checkpoint_samples: int = Field(default=10_000, ge=1)
    epsilon: float = Field(default=1e-3, gt=0, lt=1)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.01, ge=0)
    adam_eps: float = Field(default=1e-8, gt=0)
    clip_norm: float | None = Field(default=10.0, gt=0)
    divergence_factor: float = Field(default=10.0, gt=1)
    sample_steps: int = Field(default=100, ge=1)
    sample_method: Method = "euler"
    sample_epsilon: float = Field(default=1e-4, gt=0, lt=1)
    histogram_bins: int = Field(default=30, ge=1)
    d: int = Field(ge=1)
    D: int = Field(ge=1)
    n_points: int = Field(default=200, ge=1)

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= beta < 1.0 for beta in value):
            raise ValueError("betas must lie in [0, 1)")
        return value

    @model_validator(mode="after")
    def _check_dims(self) -> TrainConfig:
        if self.D > self.d:
            raise ValueError("D cannot exceed d")
        return self


class OffsubspaceTrainConfig(TrainConfig):
    optimizer: OptimizerKind = "sgd"
    learning_rate: float = Field(default=0.1, gt=0)
    epochs: int = Field(default=80_000, ge=1)
    checkpoint_every: int = Field(default=20_000, ge=1)
    d: int = Field(default=100, ge=1)
    D: int = Field(default=20, ge=1)


class SubspaceTrainConfig(TrainConfig):
    optimizer: OptimizerKind = "adamw"
    learning_rate: float = Field(default=1e-4, gt=0)
    epochs: int = Field(default=20_000, ge=1)
    checkpoint_every: int = Field(default=1_000, ge=1)
    # regress the fresh network onto the optimal subspace field before epoch 0
    distill_steps: int = Field(default=0, ge=0)
    distill_learning_rate: float = Field(default=1e-3, gt=0)
    d: int = Field(default=20, ge=1)
    D: int = Field(default=20, ge=1)


class TrainerConfig(ConfigSection):
    offsubspace: OffsubspaceTrainConfig = OffsubspaceTrainConfig()
    subspace: SubspaceTrainConfig = SubspaceTrainConfig()


class BoundCheckConfig(ConfigSection):
    times: list[float] = Field(default_factory=lambda: [0.5, 0.7, 0.9, 0.99])
    taus: list[float] = Field(default_factory=lambda: [0.9, 0.99])
    samples: int = Field(default=100_000, ge=1)

    @field_validator("times")
    @classmethod
    def _open_interval(cls, value: list[float]) -> list[float]:
        if any(not 0.0 < t < 1.0 for t in value):
            raise ValueError("bound-check times must lie in (0, 1)")
        return value


class EmbApproxConfig(ConfigSection):
    scales: list[float] = Field(default_factory=lambda: [1.0, 1000.0])
    dims: list[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    wavelength: float = Field(default=10_000.0, gt=1)
    grid_points: int = Field(default=1000, ge=2)
    t_max: float = Field(default=0.999, gt=0, lt=1)
    zoom_max: float = Field(default=0.1, gt=0, lt=1)
    error_upper: float = Field(default=0.9, gt=0, lt=1)
    panels: int = Field(default=2048, ge=1)


class VerifyConfig(ConfigSection):
    scale: VerifyScale = "quick"
    perturb_optimal: float = Field(default=0.0, ge=0)
    modules: list[Literal["core", "paths", "dynamics", "geometry", "osdnet", "trainer"]] = Field(
        default_factory=lambda: ["core", "paths", "dynamics", "geometry", "osdnet", "trainer"]
    )


class ExperimentConfig(ConfigSection):
    seed: int = Field(default=0, ge=0)
    data: DataConfig = DataConfig()
    paths: PathsConfig = PathsConfig()
    dynamics: DynamicsConfig = DynamicsConfig()
    geometry: GeometryConfig = GeometryConfig()
    osdnet: OsdnetConfig = OsdnetConfig()
    trainer: TrainerConfig = TrainerConfig()
    bound_check: BoundCheckConfig = BoundCheckConfig()
    emb_approx: EmbApproxConfig = EmbApproxConfig()
    verify: VerifyConfig = VerifyConfig()
