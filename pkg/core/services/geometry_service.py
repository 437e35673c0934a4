from __future__ import annotations

import itertools
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import ValidationError
from scipy.spatial.distance import pdist
from scipy.special import softmax

from core.errors import ConvergenceError, DatasetError, InvalidArgumentError
from core.models.data import DataMatrix, RngSpec
from core.models.region import ConvexRegion, HierarchySpec
from core.models.trajectory import Trajectory
from core.schemas.persistence import GroupFile, HierarchyFile
from core.schemas.report import ConfinementReport
from core.services.dataset_service import read_input_text
from core.services.path_service import OT, logits, sample_marginal

logger = logging.getLogger("flowlab.geometry")

Level = Literal["group", "leaf"]

FW_TOL = 1e-7
FW_MAX_ITER = 10_000
_REFRESH_EVERY = 64


def concentration_bound(t: float, tau: float, M: float, N: int) -> float:
    """Upper bound on P(max w_t(x) ≤ τ) for data with pairwise separation ≥ M.

    (1/√(2π))·((1−t)/t)·(1/M)·log(τ(N−1)/(1−τ))·N(N−1); may exceed 1.
    """
    if N < 2:
        raise InvalidArgumentError("the bound needs N ≥ 2")
    if not 0.0 < t < 1.0:
        raise InvalidArgumentError("t must lie in (0, 1)")
    if not 1.0 / N < tau < 1.0:
        raise InvalidArgumentError("tau must lie in (1/N, 1)")
    if M <= 0:
        raise InvalidArgumentError("M must be positive")
    log_term = math.log(tau * (N - 1) / (1.0 - tau))
    return (1.0 / math.sqrt(2.0 * math.pi)) * ((1.0 - t) / t) / M * log_term * N * (N - 1)


def estimate_nonconcentration(
    t: float,
    tau: float,
    data: DataMatrix,
    samples: int,
    rng: RngSpec,
    chunk: int = 10_000,
) -> tuple[float, float]:
    """Monte-Carlo frequency of max w_t(x) ≤ τ for x drawn from the OT marginal, with its
    binomial standard error. Chunk ``k`` uses substream ``k``."""
    if not 0.0 < t < 1.0:
        raise InvalidArgumentError("t must lie in (0, 1)")
    if samples < 1:
        raise InvalidArgumentError("samples must be positive")
    hits = 0
    for k, start in enumerate(range(0, samples, chunk)):
        count = min(chunk, samples - start)
        X = sample_marginal(t, data, rng, count, substream=k)
        weights = softmax(logits(X, t, data, OT), axis=0)
        hits += int(np.count_nonzero(weights.max(axis=0) <= tau))
    p_hat = hits / samples
    return p_hat, math.sqrt(p_hat * (1.0 - p_hat) / samples)


def min_separation(data: DataMatrix) -> float:
    if data.N < 2:
        raise InvalidArgumentError("min_separation needs at least two points")
    return float(pdist(data.points.T).min())


@dataclass
class _Block:
    generators: np.ndarray
    scale: float
    weights: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.weights = np.zeros(self.generators.shape[1])
        offsets = self.generators - self.generators.mean(axis=1, keepdims=True)
        self.weights[int(np.argmin((offsets**2).sum(axis=0)))] = 1.0

    def point(self) -> np.ndarray:
        return self.scale * (self.generators @ self.weights)


@dataclass(frozen=True)
class DistanceBounds:
    """Bracket lower ≤ dist ≤ upper produced by Frank–Wolfe."""

    upper: float
    lower: float
    iterations: int
    converged: bool


def _blocks(parts: Sequence[tuple[float, ConvexRegion]]) -> list[_Block]:
    return [_Block(region.generators, scale) for scale, region in parts if scale != 0.0]


def hull_distance_bounds(
    left: Sequence[tuple[float, ConvexRegion]],
    right: Sequence[tuple[float, ConvexRegion]],
    tol: float = FW_TOL,
    max_iter: int = FW_MAX_ITER,
    stop_below: float | None = None,
    stop_above: float | None = None,
) -> DistanceBounds:
    """Distance between Σ aₖ·hull(Lₖ) and Σ bₖ·hull(Rₖ) by block-coordinate pairwise
    Frank–Wolfe with exact line search on ‖z‖², z = left point − right point.

    Stops when the distance is bracketed within ``tol``, when the upper bound drops
    below ``stop_below`` or when the lower bound exceeds ``stop_above``.
    """
    plus = _blocks(left)
    minus = _blocks(right)
    blocks = [(block, 1.0) for block in plus] + [(block, -1.0) for block in minus]
    if not blocks:
        return DistanceBounds(0.0, 0.0, 0, True)

    def residual() -> np.ndarray:
        return sum(sign * block.point() for block, sign in blocks)

    r = residual()
    iteration = 0
    upper = lower = 0.0
    while True:
        f = float(r @ r)
        gap = 0.0
        best = None
        best_pair_gap = 0.0
        for block, sign in blocks:
            scores = sign * block.scale * (block.generators.T @ r)
            s = int(np.argmin(scores))
            support = np.flatnonzero(block.weights > 0.0)
            a = int(support[np.argmax(scores[support])])
            gap += float(block.weights @ scores - scores[s])
            pair_gap = float(scores[a] - scores[s])
            if pair_gap > best_pair_gap:
                best_pair_gap = pair_gap
                best = (block, sign, s, a)
        upper = math.sqrt(f)
        lower = math.sqrt(max(f - 2.0 * gap, 0.0))
        if upper - lower <= tol or best is None:
            return DistanceBounds(upper, lower, iteration, True)
        if stop_below is not None and upper < stop_below:
            return DistanceBounds(upper, lower, iteration, True)
        if stop_above is not None and lower > stop_above:
            return DistanceBounds(upper, lower, iteration, True)
        if iteration >= max_iter:
            return DistanceBounds(upper, lower, iteration, False)

        block, sign, s, a = best
        direction = sign * block.scale * (block.generators[:, s] - block.generators[:, a])
        norm_sq = float(direction @ direction)
        if norm_sq == 0.0:
            block.weights[s] += block.weights[a]
            block.weights[a] = 0.0
        else:
            step = min(max(-float(r @ direction) / norm_sq, 0.0), float(block.weights[a]))
            block.weights[s] += step
            block.weights[a] -= step
            if block.weights[a] <= 1e-15:
                block.weights[s] += block.weights[a]
                block.weights[a] = 0.0
            r = r + step * direction
        iteration += 1
        if iteration % _REFRESH_EVERY == 0:
            r = residual()


def convex_distance(
    A: ConvexRegion, B: ConvexRegion, tol: float = FW_TOL, max_iter: int = FW_MAX_ITER
) -> float:
    """Euclidean distance between hull(A) and hull(B), accurate to ``tol``."""
    if A.d != B.d:
        raise InvalidArgumentError("regions live in different dimensions")
    bounds = hull_distance_bounds([(1.0, A)], [(1.0, B)], tol, max_iter)
    if not bounds.converged:
        raise ConvergenceError(
            f"Frank–Wolfe did not converge in {max_iter} iterations", bounds.lower, bounds.upper
        )
    return bounds.upper


def blend_region(
    S: ConvexRegion, C: ConvexRegion, t: float, max_generators: int = 100_000
) -> ConvexRegion:
    """(1−t)·S + t·C as the hull of all pairwise generator sums."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError("t must lie in [0, 1]")
    if t == 0.0:
        return S
    if t == 1.0:
        return C
    if S.m * C.m > max_generators:
        raise InvalidArgumentError(
            "blended region has too many generators",
            {"generators": S.m * C.m, "cap": max_generators},
        )
    sums = (1.0 - t) * S.generators[:, :, None] + t * C.generators[:, None, :]
    return ConvexRegion(sums.reshape(S.d, S.m * C.m))


def _blend_parts(S: ConvexRegion, C: ConvexRegion, t: float) -> list[tuple[float, ConvexRegion]]:
    return [(1.0 - t, S), (t, C)]


@dataclass(frozen=True)
class SeparationSettings:
    tol: float = 1e-4
    fw_tol: float = FW_TOL
    max_iter: int = FW_MAX_ITER

    @property
    def contact(self) -> float:
        """Blended regions closer than this count as touching."""
        return 10.0 * self.fw_tol


def _sphere_lower_bound(S: ConvexRegion, Ci: ConvexRegion, Cj: ConvexRegion, t: float) -> float:
    gap = t * float(np.linalg.norm(Ci.centroid - Cj.centroid))
    return gap - 2.0 * (1.0 - t) * S.radius - t * (Ci.radius + Cj.radius)


def _pair_touching(
    S: ConvexRegion, Ci: ConvexRegion, Cj: ConvexRegion, t: float, settings: SeparationSettings
) -> bool:
    if _sphere_lower_bound(S, Ci, Cj, t) > settings.contact:
        return False
    bounds = hull_distance_bounds(
        _blend_parts(S, Ci, t),
        _blend_parts(S, Cj, t),
        settings.fw_tol,
        settings.max_iter,
        stop_below=settings.contact,
        stop_above=settings.contact,
    )
    if not bounds.converged:
        logger.warning(
            "Frank–Wolfe cap reached at t=%.6f (distance in [%.3g, %.3g])", t, bounds.lower, bounds.upper
        )
    return bounds.upper <= settings.contact


def _ordered_pairs(S: ConvexRegion, regions: Sequence[ConvexRegion], t: float) -> list[tuple[int, int]]:
    pairs = list(itertools.combinations(range(len(regions)), 2))
    return sorted(pairs, key=lambda p: _sphere_lower_bound(S, regions[p[0]], regions[p[1]], t))


def any_touching(
    S: ConvexRegion, regions: Sequence[ConvexRegion], t: float, settings: SeparationSettings
) -> bool:
    return any(
        _pair_touching(S, regions[i], regions[j], t, settings)
        for i, j in _ordered_pairs(S, regions, t)
    )


def separation_gap(
    S: ConvexRegion,
    regions: Sequence[ConvexRegion],
    t: float,
    fw_tol: float = FW_TOL,
    max_iter: int = FW_MAX_ITER,
) -> float:
    """g(t) = min over pairs of dist((1−t)S + tCᵢ, (1−t)S + tCⱼ)."""
    best = math.inf
    for i, j in itertools.combinations(range(len(regions)), 2):
        if _sphere_lower_bound(S, regions[i], regions[j], t) > best:
            continue
        bounds = hull_distance_bounds(
            _blend_parts(S, regions[i], t), _blend_parts(S, regions[j], t), fw_tol, max_iter
        )
        best = min(best, bounds.upper)
    return best


def separation_time(
    S: ConvexRegion,
    regions: Sequence[ConvexRegion],
    tol: float = 1e-4,
    fw_tol: float = FW_TOL,
    max_iter: int = FW_MAX_ITER,
) -> float:
    """Largest t at which two blended regions (1−t)S + tCᵢ still touch, to width ``tol``.

    The touching set is an interval containing 0, so bisection applies. The lower end
    of the final bracket is returned; a degenerate source gives exactly 0.
    """
    if len(regions) < 2:
        raise InvalidArgumentError("separation needs at least two regions")
    settings = SeparationSettings(tol=tol, fw_tol=fw_tol, max_iter=max_iter)
    if any_touching(S, regions, 1.0, settings):
        raise InvalidArgumentError("regions intersect at t = 1")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if any_touching(S, regions, mid, settings):
            lo = mid
        else:
            hi = mid
    logger.debug("Separation time in [%.6f, %.6f]", lo, hi)
    return lo


def hierarchy_separation_times(hierarchy: HierarchySpec, tol: float = 1e-4) -> tuple[float, float]:
    """(t₁, t₂): separation times at the group level and at the leaf level."""
    t1 = separation_time(hierarchy.source, hierarchy.groups, tol)
    t2 = separation_time(hierarchy.source, hierarchy.flat_leaves, tol)
    return t1, t2


def point_region_bounds(
    x: np.ndarray, parts: Sequence[tuple[float, ConvexRegion]], tol: float
) -> DistanceBounds:
    return hull_distance_bounds(
        [(1.0, ConvexRegion.point(x))],
        parts,
        tol=min(tol, FW_TOL),
        stop_below=tol,
        stop_above=tol,
    )


def region_membership(x: np.ndarray, region: ConvexRegion, tol: float = 1e-9) -> bool:
    """True iff ``x`` lies within ``tol`` of hull(region)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != region.d:
        raise InvalidArgumentError("point and region dimensions differ")
    return point_region_bounds(x, [(1.0, region)], tol).upper <= tol


def blended_membership(x: np.ndarray, S: ConvexRegion, C: ConvexRegion, t: float, tol: float) -> bool:
    """Membership of ``x`` in (1−t)S + tC without materialising the Minkowski sum."""
    return point_region_bounds(x, _blend_parts(S, C, t), tol).upper <= tol


def confinement_check(
    traj: Trajectory,
    hierarchy: HierarchySpec,
    t_from: float,
    level: Level = "group",
    tol: float = 1e-6,
) -> ConfinementReport:
    """Find the blended region holding the state at ``t_from`` and verify every later
    state stays inside the correspondingly blended region."""
    regions = hierarchy.groups if level == "group" else hierarchy.flat_leaves
    later = np.flatnonzero(traj.times >= t_from)
    if later.size == 0:
        raise InvalidArgumentError("t_from lies beyond the trajectory")
    start = int(later[0])
    t_start = float(traj.times[start])
    x = traj.state_at(start)
    distances = [
        point_region_bounds(x, _blend_parts(hierarchy.source, region, t_start), tol).upper for region in regions
    ]
    holder = next((i for i, dist in enumerate(distances) if dist <= tol), None)
    if holder is None:
        return ConfinementReport(
            confined=False,
            level=level,
            out_of_support=True,
            start_index=start,
            start_distance=min(distances),
            region_distances=distances,
        )
    violations = [
        k
        for k in range(start + 1, traj.times.size)
        if not blended_membership(traj.state_at(k), hierarchy.source, regions[holder], float(traj.times[k]), tol)
    ]
    first = violations[0] if violations else None
    return ConfinementReport(
        confined=not violations,
        level=level,
        region_index=holder,
        start_index=start,
        first_violation_index=first,
        first_violation_time=None if first is None else float(traj.times[first]),
        violation_count=len(violations),
        start_distance=distances[holder],
        region_distances=distances,
    )


def ball_proxy(d: int, radius: float, vertices: int = 64) -> ConvexRegion:
    """A polytope containing the centred ball of the given radius.

    d = 1: the interval; d = 2: a circumscribed regular polygon; otherwise the
    cross-polytope with vertices ±r√d·eᵢ, plus the cube corners ±r(1,…,1) when d ≤ 10.
    """
    if d < 1 or radius <= 0:
        raise InvalidArgumentError("ball proxy needs d ≥ 1 and a positive radius")
    if d == 1:
        return ConvexRegion.interval(-radius, radius)
    if d == 2:
        angles = 2.0 * np.pi * np.arange(vertices) / vertices
        outer = radius / math.cos(math.pi / vertices)
        return ConvexRegion(outer * np.stack([np.cos(angles), np.sin(angles)]))
    eye = radius * math.sqrt(d) * np.eye(d)
    generators = [eye, -eye]
    if d <= 10:
        corners = np.array(list(itertools.product((-1.0, 1.0), repeat=d))).T
        generators.append(radius * corners)
    return ConvexRegion(np.concatenate(generators, axis=1))


def hierarchy_from_labels(data: DataMatrix, labels: np.ndarray, source: ConvexRegion) -> HierarchySpec:
    """Groups are the label classes; each data point is its own leaf."""
    groups = []
    for label in np.unique(labels):
        columns = np.flatnonzero(labels == label)
        groups.append(tuple(ConvexRegion.point(data.points[:, c]) for c in columns))
    return HierarchySpec(source=source, leaves=tuple(groups))


def check_hierarchy(hierarchy: HierarchySpec, tol: float = FW_TOL) -> None:
    """Leaves and group hulls must be pairwise disjoint."""
    for label, regions in (("leaves", hierarchy.flat_leaves), ("groups", hierarchy.groups)):
        for (i, A), (j, B) in itertools.combinations(enumerate(regions), 2):
            bounds = hull_distance_bounds([(1.0, A)], [(1.0, B)], tol, stop_below=10 * tol, stop_above=10 * tol)
            if bounds.upper <= 10 * tol:
                raise InvalidArgumentError(f"{label} {i} and {j} intersect")


def load_hierarchy(path: str | Path) -> HierarchySpec:
    try:
        payload = HierarchyFile.model_validate_json(read_input_text(path, "hierarchy file"))
    except ValidationError as exc:
        raise DatasetError(f"invalid hierarchy file: {exc.errors()[0]['msg']}") from exc
    source = ConvexRegion(np.array(payload.S, dtype=np.float64).T)
    leaves = tuple(
        tuple(ConvexRegion(np.array(leaf, dtype=np.float64).T) for leaf in group.leaves)
        for group in payload.groups
    )
    hierarchy = HierarchySpec(source=source, leaves=leaves)
    check_hierarchy(hierarchy)
    return hierarchy


def hierarchy_to_json(hierarchy: HierarchySpec) -> str:
    payload = HierarchyFile(
        S=hierarchy.source.generators.T.tolist(),
        groups=[GroupFile(leaves=[leaf.generators.T.tolist() for leaf in group]) for group in hierarchy.leaves],
    )
    return json.dumps(payload.model_dump())


def save_hierarchy(path: str | Path, hierarchy: HierarchySpec) -> Path:
    path = Path(path)
    path.write_text(hierarchy_to_json(hierarchy), encoding="utf-8")
    return path
