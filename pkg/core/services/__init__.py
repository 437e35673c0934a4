"""Numerical services, one per area of the library."""

from core.services import (
    dataset_service,
    dynamics_service,
    export_service,
    geometry_service,
    network_service,
    optimizer_service,
    osdnet_service,
    path_service,
    trainer_service,
    verify_service,
)

__all__ = [
    "dataset_service",
    "path_service",
    "dynamics_service",
    "geometry_service",
    "network_service",
    "osdnet_service",
    "optimizer_service",
    "trainer_service",
    "export_service",
    "verify_service",
]
