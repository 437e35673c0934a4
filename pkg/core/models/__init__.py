"""Immutable domain types."""

from core.models.data import DataMatrix, RngSpec, SubspaceBasis
from core.models.field import VelocityField
from core.models.network import DiagonalField, OSDNetParams, QuadraticData, SubspaceNet
from core.models.region import ConvexRegion, HierarchySpec
from core.models.schedule import (
    CustomSchedule,
    OTSchedule,
    PathSchedule,
    ScaledMeanSchedule,
    VPSchedule,
)
from core.models.trajectory import TIE, TimeGrid, Trajectory

__all__ = [
    "DataMatrix",
    "SubspaceBasis",
    "RngSpec",
    "VelocityField",
    "PathSchedule",
    "ScaledMeanSchedule",
    "OTSchedule",
    "VPSchedule",
    "CustomSchedule",
    "TimeGrid",
    "Trajectory",
    "TIE",
    "ConvexRegion",
    "HierarchySpec",
    "DiagonalField",
    "SubspaceNet",
    "OSDNetParams",
    "QuadraticData",
]
