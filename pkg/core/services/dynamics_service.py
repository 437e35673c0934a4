from __future__ import annotations

import io
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.optimize import nnls
from scipy.spatial.distance import cdist

from core.errors import IntegrationError, InvalidArgumentError
from core.models.data import DataMatrix, RngSpec
from core.models.field import VelocityField
from core.models.schedule import PathSchedule
from core.models.trajectory import TIE, GridKind, TimeGrid, Trajectory
from core.services.dataset_service import format_real
from core.services.path_service import OT, as_batch, softmax_weights

logger = logging.getLogger("flowlab.dynamics")

Method = Literal["euler", "rk4"]


def make_grid(kind: GridKind, steps: int, epsilon: float) -> TimeGrid:
    """Uniform nodes on [0, 1−ε], or geometric nodes 1 − ε^{k/steps} whose gaps to 1 shrink
    by the constant ratio ε^{1/steps}."""
    if steps < 1:
        raise InvalidArgumentError("steps must be at least 1")
    if not 0.0 < epsilon < 1.0:
        raise InvalidArgumentError("epsilon must lie in (0, 1)")
    if kind == "uniform":
        nodes = np.linspace(0.0, 1.0 - epsilon, steps + 1)
    elif kind == "geometric":
        nodes = 1.0 - epsilon ** (np.arange(steps + 1) / steps)
    else:
        raise InvalidArgumentError(f"unknown grid kind {kind!r}")
    nodes[0] = 0.0
    nodes[-1] = 1.0 - epsilon
    return TimeGrid(nodes=nodes, epsilon=epsilon, kind=kind)


def _step(field: VelocityField, X: np.ndarray, t: float, h: float, method: Method) -> np.ndarray:
    if method == "euler":
        return X + h * field(X, t)
    k1 = field(X, t)
    k2 = field(X + 0.5 * h * k1, t + 0.5 * h)
    k3 = field(X + 0.5 * h * k2, t + 0.5 * h)
    k4 = field(X + h * k3, t + h)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def march(
    field: VelocityField,
    X0: np.ndarray,
    nodes: np.ndarray,
    method: Method = "rk4",
    record: Sequence[int] | None = None,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Step a d×B batch across ``nodes``; returns the final state and the states at ``record``."""
    if method not in ("euler", "rk4"):
        raise InvalidArgumentError(f"unknown method {method!r}")
    wanted = set(record or ())
    X = np.array(X0, dtype=np.float64, copy=True)
    recorded: list[np.ndarray] = [X.copy()] if 0 in wanted else []
    for k in range(len(nodes) - 1):
        t = float(nodes[k])
        X = _step(field, X, t, float(nodes[k + 1]) - t, method)
        if not np.all(np.isfinite(X)):
            raise IntegrationError("non-finite state during integration", node_index=k + 1)
        if k + 1 in wanted:
            recorded.append(X.copy())
    return X, recorded


def integrate_ode(
    field: VelocityField, x0: np.ndarray, grid: TimeGrid, method: Method = "rk4"
) -> Trajectory:
    X0, _ = as_batch(x0)
    _, states = march(field, X0, grid.nodes, method, record=range(grid.nodes.size))
    return Trajectory(times=grid.nodes, states=np.concatenate(states, axis=1))


def integrate_batch(
    field: VelocityField, X0: np.ndarray, grid: TimeGrid, method: Method = "rk4"
) -> np.ndarray:
    """Terminal states φ_{1−ε}(x) of a d×B batch of starts."""
    return march(field, X0, grid.nodes, method)[0]


def integrate_batch_states(
    field: VelocityField,
    X0: np.ndarray,
    grid: TimeGrid,
    method: Method = "rk4",
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """States of a batch at the requested node indices (default all), shape (k, d, B)."""
    indices = list(range(grid.nodes.size)) if indices is None else sorted(indices)
    _, recorded = march(field, X0, grid.nodes, method, record=indices)
    return np.stack(recorded, axis=0)


def nearest_node(grid: TimeGrid, t: float) -> int:
    return int(np.argmin(np.abs(grid.nodes - t)))


def euler_maruyama(
    drift: VelocityField,
    sigma: float,
    X0: np.ndarray,
    nodes: np.ndarray,
    generator: np.random.Generator,
    record_all: bool = False,
) -> tuple[np.ndarray, list[np.ndarray]]:
    if sigma < 0:
        raise InvalidArgumentError("sigma must be non-negative")
    X = np.array(X0, dtype=np.float64, copy=True)
    recorded = [X.copy()] if record_all else []
    for k in range(len(nodes) - 1):
        t = float(nodes[k])
        h = float(nodes[k + 1]) - t
        X = X + h * drift(X, t)
        if sigma > 0:
            X = X + sigma * np.sqrt(h) * generator.standard_normal(X.shape)
        if not np.all(np.isfinite(X)):
            raise IntegrationError("non-finite state during integration", node_index=k + 1)
        if record_all:
            recorded.append(X.copy())
    return X, recorded


def integrate_sde(
    drift: VelocityField,
    sigma: float,
    x0: np.ndarray,
    grid: TimeGrid,
    rng: RngSpec,
    substream: int | None = None,
) -> Trajectory:
    """Euler–Maruyama for dx = v(x, t)dt + σ dW; σ = 0 is exactly the Euler ODE path."""
    X0, _ = as_batch(x0)
    _, states = euler_maruyama(drift, sigma, X0, grid.nodes, rng.generator(substream), record_all=True)
    return Trajectory(times=grid.nodes, states=np.concatenate(states, axis=1))


def integrate_sde_batch(
    drift: VelocityField,
    sigma: float,
    X0: np.ndarray,
    grid: TimeGrid,
    rng: RngSpec,
    substream: int | None = None,
) -> np.ndarray:
    return euler_maruyama(drift, sigma, X0, grid.nodes, rng.generator(substream))[0]


def snap_endpoints(terminal: np.ndarray, data: DataMatrix, snap_tol: float = 1e-6) -> np.ndarray:
    """Index of the data point nearest each terminal state, or ``TIE`` when the two
    smallest distances differ by less than ``snap_tol`` times their mean."""
    X, single = as_batch(terminal)
    distances = cdist(data.points.T, X.T)
    nearest = np.argmin(distances, axis=0)
    if data.N >= 2:
        two = np.sort(distances, axis=0)[:2]
        tie = (two[1] - two[0]) < snap_tol * 0.5 * (two[0] + two[1])
        nearest = np.where(tie, TIE, nearest)
    return nearest[:1] if single else nearest


def generate(
    field: VelocityField,
    x0: np.ndarray,
    grid: TimeGrid,
    data: DataMatrix,
    snap_tol: float = 1e-6,
    method: Method = "rk4",
) -> Trajectory:
    """Integrate to 1−ε and resolve the t = 1 endpoint by snapping to the nearest data point."""
    trajectory = integrate_ode(field, x0, grid, method)
    index = int(snap_endpoints(trajectory.terminal_state, data, snap_tol)[0])
    if index == TIE:
        logger.warning("Endpoint tie at %s", np.array2string(trajectory.terminal_state, precision=4))
        return Trajectory(trajectory.times, trajectory.states, endpoint=None, snapped_index=TIE)
    endpoint = data.points[:, index].copy()
    return Trajectory(trajectory.times, trajectory.states, endpoint=endpoint, snapped_index=index)


def generate_batch(
    field: VelocityField,
    X0: np.ndarray,
    grid: TimeGrid,
    data: DataMatrix,
    snap_tol: float = 1e-6,
    method: Method = "rk4",
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal states and snapped indices (``TIE`` for ties) for a batch of starts."""
    terminal = integrate_batch(field, X0, grid, method)
    return terminal, snap_endpoints(terminal, data, snap_tol)


def snap_distances(terminal: np.ndarray, data: DataMatrix) -> np.ndarray:
    """Distance from each terminal state to its nearest data point."""
    X, _ = as_batch(terminal)
    return cdist(data.points.T, X.T).min(axis=0)


def limit_residuals(
    terminal: np.ndarray, data: DataMatrix, epsilon: float, sched: PathSchedule = OT
) -> np.ndarray:
    """‖Y·w_{1−ε}(x) − y_nearest‖ per terminal state x at time 1−ε under ``sched``.

    Y·w is the posterior mean of the endpoint (for OT, where one more Euler step of the
    optimal field lands at t = 1), so this measures how far the endpoint is from
    collapsing onto its nearest data point.
    """
    X, _ = as_batch(terminal)
    landing = data.points @ softmax_weights(X, 1.0 - epsilon, data, sched)
    nearest = np.argmin(cdist(data.points.T, X.T), axis=0)
    return np.linalg.norm(landing - data.points[:, nearest], axis=0)


def straightening_angles(field: VelocityField, X: np.ndarray, t: float, data: DataMatrix) -> np.ndarray:
    """Angle between v(x, t) and the direction to the nearest data point, per column."""
    velocity = field(X, t)
    nearest = np.argmin(cdist(data.points.T, X.T), axis=0)
    direction = data.points[:, nearest] - X
    cosine = (velocity * direction).sum(axis=0) / (
        np.linalg.norm(velocity, axis=0) * np.linalg.norm(direction, axis=0)
    )
    return np.arccos(np.clip(cosine, -1.0, 1.0))


def fd_step(x: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.linalg.norm(x)))


def flow_map(
    field: VelocityField,
    X: np.ndarray,
    s: float,
    t: float,
    steps: int = 200,
    method: Method = "rk4",
) -> np.ndarray:
    """φ_{s,t} applied to a point or batch, on a uniform grid of ``steps`` steps."""
    if not s <= t:
        raise InvalidArgumentError("flow map needs s ≤ t")
    if s == t:
        return np.array(X, dtype=np.float64, copy=True)
    batch, single = as_batch(X)
    out = march(field, batch, np.linspace(s, t, steps + 1), method)[0]
    return out[:, 0] if single else out


def flow_jacobian_fd(
    field: VelocityField,
    x: np.ndarray,
    s: float,
    t: float,
    h: float | None = None,
    steps: int = 200,
    method: Method = "rk4",
) -> np.ndarray:
    """Central-difference Jacobian ∇_x φ_{s,t}(x)."""
    if not s < t:
        raise InvalidArgumentError("need s < t")
    x = np.asarray(x, dtype=np.float64)
    h = fd_step(x) if h is None else h
    if h <= 0:
        raise InvalidArgumentError("h must be positive")
    d = x.size
    offsets = h * np.eye(d)
    stencil = np.concatenate([x[:, None] + offsets, x[:, None] - offsets], axis=1)
    mapped = flow_map(field, stencil, s, t, steps, method)
    return (mapped[:, :d] - mapped[:, d:]) / (2.0 * h)


def flow_hessian_fd(
    field: VelocityField,
    x: np.ndarray,
    s: float,
    t: float,
    h: float | None = None,
    steps: int = 200,
    method: Method = "rk4",
) -> np.ndarray:
    """Second differences of φ_{s,t}; entry [:, j, k] is ∂²φ/∂x_j∂x_k."""
    x = np.asarray(x, dtype=np.float64)
    h = fd_step(x) if h is None else h
    d = x.size
    stencil = hessian_stencil(x, h)
    mapped = flow_map(field, stencil, s, t, steps, method)
    return assemble_hessian(mapped, d, h)


def hessian_stencil(x: np.ndarray, h: float) -> np.ndarray:
    d = x.size
    eye = h * np.eye(d)
    columns = [x]
    for j in range(d):
        for k in range(d):
            columns.extend(
                [x + eye[j] + eye[k], x + eye[j] - eye[k], x - eye[j] + eye[k], x - eye[j] - eye[k]]
            )
    return np.stack(columns, axis=1)


def assemble_hessian(values: np.ndarray, d: int, h: float) -> np.ndarray:
    hessian = np.empty((values.shape[0], d, d))
    for j in range(d):
        for k in range(d):
            base = 1 + 4 * (j * d + k)
            pp, pm, mp, mm = (values[:, base + i] for i in range(4))
            hessian[:, j, k] = (pp - pm - mp + mm) / (4.0 * h * h)
    return hessian


def _field_jacobians(field: VelocityField, samples: np.ndarray, t: float) -> np.ndarray:
    """FD Jacobians of the field at every column of ``samples``, shape (n, d, d)."""
    d, n = samples.shape
    steps = np.array([fd_step(samples[:, i]) for i in range(n)])
    plus = samples[:, :, None] + steps[None, :, None] * np.eye(d)[:, None, :]
    minus = samples[:, :, None] - steps[None, :, None] * np.eye(d)[:, None, :]
    stencil = np.concatenate([plus.reshape(d, n * d), minus.reshape(d, n * d)], axis=1)
    values = field(stencil, t)
    delta = (values[:, : n * d] - values[:, n * d :]).reshape(d, n, d)
    return np.transpose(delta, (1, 0, 2)) / (2.0 * steps[:, None, None])


def lipschitz_estimate(field: VelocityField, region_samples: np.ndarray, t_grid: TimeGrid) -> float:
    """max over samples and grid nodes of ‖∇_x v(x, t)‖₂ by central differences."""
    samples, _ = as_batch(region_samples)
    if samples.shape[1] < 2:
        raise InvalidArgumentError("need at least two samples")
    best = 0.0
    for t in t_grid.nodes:
        jacobians = _field_jacobians(field, samples, float(t))
        best = max(best, float(np.linalg.norm(jacobians, ord=2, axis=(1, 2)).max()))
    return best


def hessian_norm_estimate(field: VelocityField, region_samples: np.ndarray, t_grid: TimeGrid) -> float:
    """max over samples and grid nodes of the Frobenius norm of the FD Hessian of the field."""
    samples, _ = as_batch(region_samples)
    best = 0.0
    for t in t_grid.nodes:
        for i in range(samples.shape[1]):
            x = samples[:, i]
            h = fd_step(x)
            values = field(hessian_stencil(x, h), float(t))
            best = max(best, float(np.linalg.norm(assemble_hessian(values, x.size, h))))
    return best


def jacobian_bound(lipschitz: float, elapsed: float) -> float:
    """‖∇_x φ_{s,t}‖₂ ≤ exp(L·(t − s))."""
    return float(np.exp(lipschitz * elapsed))


def hessian_bound(lipschitz: float, hessian_norm: float, t: float) -> float:
    """Flow-map Hessian bound (M/L)(exp(2Lt) − exp(Lt)); the L → 0 limit is M·t."""
    if lipschitz == 0.0:
        return hessian_norm * t
    return float(hessian_norm / lipschitz * (np.exp(2.0 * lipschitz * t) - np.exp(lipschitz * t)))


def fit_noise_scaling(sigmas: Sequence[float], errors: Sequence[float]) -> tuple[float, float, float]:
    """Non-negative least-squares fit errors ≈ c₂σ² + c₃σ⁴; returns (c₂, c₃, R²)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    design = np.stack([sigmas**2, sigmas**4], axis=1)
    (c2, c3), _ = nnls(design, errors)
    residual = errors - design @ np.array([c2, c3])
    total = ((errors - errors.mean()) ** 2).sum()
    r2 = 1.0 - float((residual**2).sum()) / float(total) if total > 0 else 1.0
    return float(c2), float(c3), r2


def trajectory_csv(trajectory: Trajectory) -> str:
    buffer = io.StringIO()
    header = ["t"] + [f"x{i}" for i in range(trajectory.d)]
    buffer.write(",".join(header) + "\n")
    for k, t in enumerate(trajectory.times):
        row = [format_real(float(t))] + [format_real(float(v)) for v in trajectory.states[:, k]]
        buffer.write(",".join(row) + "\n")
    return buffer.getvalue()


def save_trajectory(path: str | Path, trajectory: Trajectory) -> Path:
    path = Path(path)
    path.write_text(trajectory_csv(trajectory), encoding="utf-8")
    return path
