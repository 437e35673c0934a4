"""Pydantic schemas for configuration, persisted files and reports."""

from core.schemas.base import CamelModel, ConfigSection, ErrorDetails, ErrorResponse
from core.schemas.experiment import (
    BoundCheckConfig,
    DataConfig,
    DynamicsConfig,
    EmbApproxConfig,
    ExperimentConfig,
    GeometryConfig,
    OffsubspaceTrainConfig,
    OsdnetConfig,
    PathsConfig,
    SubspaceTrainConfig,
    TrainConfig,
    TrainerConfig,
    VerifyConfig,
)
from core.schemas.osdnet import EmbeddingConfig, NetConfig
from core.schemas.persistence import BasisFile, GroupFile, HierarchyFile
from core.schemas.report import ConfinementReport, InvariantResult, RunManifest, VerifyReport
from core.schemas.training import (
    ArrayPayload,
    CheckpointFile,
    CheckpointMetrics,
    HistogramSchema,
    OffNormStats,
    OptimizerStatePayload,
    RngPayload,
)

__all__ = [
    "CamelModel",
    "ConfigSection",
    "ErrorDetails",
    "ErrorResponse",
    "ExperimentConfig",
    "DataConfig",
    "PathsConfig",
    "DynamicsConfig",
    "GeometryConfig",
    "OsdnetConfig",
    "TrainConfig",
    "OffsubspaceTrainConfig",
    "SubspaceTrainConfig",
    "TrainerConfig",
    "BoundCheckConfig",
    "EmbApproxConfig",
    "VerifyConfig",
    "EmbeddingConfig",
    "NetConfig",
    "BasisFile",
    "GroupFile",
    "HierarchyFile",
    "InvariantResult",
    "VerifyReport",
    "ConfinementReport",
    "RunManifest",
    "ArrayPayload",
    "CheckpointFile",
    "CheckpointMetrics",
    "HistogramSchema",
    "OffNormStats",
    "OptimizerStatePayload",
    "RngPayload",
]
