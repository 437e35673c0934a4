from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from core.errors import InvalidArgumentError


@dataclass(frozen=True)
class ConvexRegion:
    """Convex hull of the columns of ``generators`` (d×m)."""

    generators: np.ndarray

    def __post_init__(self) -> None:
        generators = np.array(self.generators, dtype=np.float64, copy=True)
        if generators.ndim == 1:
            generators = generators[:, None]
        if generators.ndim != 2 or generators.shape[1] < 1:
            raise InvalidArgumentError("a region needs at least one generator")
        if not np.all(np.isfinite(generators)):
            raise InvalidArgumentError("region generators must be finite")
        generators.setflags(write=False)
        object.__setattr__(self, "generators", generators)

    @classmethod
    def point(cls, x: np.ndarray) -> ConvexRegion:
        return cls(np.asarray(x, dtype=np.float64).reshape(-1, 1))

    @classmethod
    def interval(cls, low: float, high: float) -> ConvexRegion:
        return cls(np.array([[low, high]], dtype=np.float64))

    @property
    def d(self) -> int:
        return self.generators.shape[0]

    @property
    def m(self) -> int:
        return self.generators.shape[1]

    @property
    def centroid(self) -> np.ndarray:
        return self.generators.mean(axis=1)

    @property
    def radius(self) -> float:
        """Radius of the smallest centroid-centred ball containing the hull."""
        offsets = self.generators - self.centroid[:, None]
        return float(np.sqrt((offsets**2).sum(axis=0)).max())


@dataclass(frozen=True)
class HierarchySpec:
    """Two-level hierarchy: ``leaves[i][j]`` is C_{i,j}; group hulls C_i are the
    hulls of their leaves; ``source`` is the bounded convex support S of p₀."""

    source: ConvexRegion
    leaves: tuple[tuple[ConvexRegion, ...], ...]

    def __post_init__(self) -> None:
        if not self.leaves or any(len(group) == 0 for group in self.leaves):
            raise InvalidArgumentError("every group needs at least one leaf")
        dims = {leaf.d for group in self.leaves for leaf in group} | {self.source.d}
        if len(dims) != 1:
            raise InvalidArgumentError("hierarchy regions disagree on dimension")

    @property
    def groups(self) -> list[ConvexRegion]:
        return [
            ConvexRegion(np.concatenate([leaf.generators for leaf in group], axis=1))
            for group in self.leaves
        ]

    @property
    def flat_leaves(self) -> list[ConvexRegion]:
        return [leaf for group in self.leaves for leaf in group]
