from __future__ import annotations

import logging

import numpy as np
import pytest

from core.models.data import DataMatrix, RngSpec, SubspaceBasis
from core.schemas.experiment import STREAM_DATA, OffsubspaceTrainConfig, SubspaceTrainConfig
from core.schemas.osdnet import EmbeddingConfig, NetConfig
from core.services.dataset_service import sparse_dataset, subspace_cube_dataset, svd_decompose


@pytest.fixture
def sparse_data() -> DataMatrix:
    return sparse_dataset(RngSpec(0, STREAM_DATA), 6, d=2, box=10.0, min_separation=5.0)


@pytest.fixture
def symmetric_pair() -> DataMatrix:
    return DataMatrix(np.array([[1.0, -1.0], [0.0, 0.0]]))


@pytest.fixture
def single_point() -> DataMatrix:
    return DataMatrix(np.array([[2.0], [0.0]]))


@pytest.fixture
def cube() -> tuple[DataMatrix, SubspaceBasis]:
    data = subspace_cube_dataset(RngSpec(3, STREAM_DATA), 20, d=6, D=3)
    return data, svd_decompose(data)


@pytest.fixture
def small_embedding() -> EmbeddingConfig:
    return EmbeddingConfig(scale=1000.0, wavelength=10000.0, dim=16)


@pytest.fixture
def small_net(small_embedding: EmbeddingConfig) -> NetConfig:
    return NetConfig(hidden=8, blocks=1, activation="silu", embedding=small_embedding)


@pytest.fixture
def offsubspace_config() -> OffsubspaceTrainConfig:
    return OffsubspaceTrainConfig(
        learning_rate=0.1,
        epochs=40,
        checkpoint_every=20,
        batch=128,
        checkpoint_samples=50,
        sample_steps=10,
        d=8,
        D=3,
        n_points=20,
    )


@pytest.fixture
def subspace_config() -> SubspaceTrainConfig:
    return SubspaceTrainConfig(
        learning_rate=1e-3,
        epochs=20,
        checkpoint_every=10,
        batch=64,
        checkpoint_samples=30,
        sample_steps=10,
        d=3,
        D=3,
        n_points=10,
    )


@pytest.fixture(autouse=True)
def isolated_logging():
    """The CLI installs its own root handler; put the previous one back afterwards."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers = handlers
    root.setLevel(level)
    logging.getLogger("flowlab").setLevel(logging.NOTSET)
    logging.captureWarnings(False)
