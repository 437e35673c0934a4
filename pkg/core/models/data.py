from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from core.errors import InvalidArgumentError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class DataMatrix:
    """The real data points y¹…yᴺ stored as the columns of a d×N matrix."""

    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise InvalidArgumentError(
                "data matrix must be d×N with d ≥ 1 and N ≥ 1",
                {"shape": list(points.shape)},
            )
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError("data matrix has non-finite entries")
        object.__setattr__(self, "points", _frozen(points))

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> DataMatrix:
        return cls(np.asarray(rows, dtype=np.float64).T)

    @property
    def d(self) -> int:
        return self.points.shape[0]

    @property
    def N(self) -> int:
        return self.points.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.points.mean(axis=1)

    def column(self, index: int) -> np.ndarray:
        return self.points[:, index]


@dataclass(frozen=True)
class SubspaceBasis:
    """Reduced SVD factors Y = V·R together with an orthonormal completion Vperp."""

    V: np.ndarray
    R: np.ndarray
    Vperp: np.ndarray
    rank_tol: float = 1e-10

    def __post_init__(self) -> None:
        for name in ("V", "R", "Vperp"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.V.shape[1] != self.R.shape[0]:
            raise InvalidArgumentError("V and R disagree on the subspace rank")
        if self.V.shape[0] != self.Vperp.shape[0]:
            raise InvalidArgumentError("V and Vperp disagree on the ambient dimension")
        if self.V.shape[1] + self.Vperp.shape[1] != self.V.shape[0]:
            raise InvalidArgumentError("V and Vperp do not complete the ambient space")

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @property
    def D(self) -> int:
        return self.V.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        """Coordinates Vᵀx of ``x`` (vector or d×B batch) in the data subspace."""
        return self.V.T @ x

    def project_perp(self, x: np.ndarray) -> np.ndarray:
        return self.Vperp.T @ x


@dataclass(frozen=True)
class RngSpec:
    """Seed plus stream id; every (seed, stream_id, substream) triple is one
    reproducible counter-based stream."""

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0:
            raise InvalidArgumentError("seed and stream_id must be non-negative")

    def generator(self, substream: int | None = None) -> np.random.Generator:
        spawn_key = (self.stream_id,) if substream is None else (self.stream_id, substream)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        return np.random.Generator(np.random.Philox(sequence))

    def with_stream(self, stream_id: int) -> RngSpec:
        return RngSpec(seed=self.seed, stream_id=stream_id)
