from __future__ import annotations

import functools
import itertools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from core.errors import FlowlabError
from core.models.data import DataMatrix, RngSpec
from core.models.network import DiagonalField, OSDNetParams
from core.models.region import ConvexRegion
from core.models.schedule import OTSchedule, VPSchedule
from core.models.trajectory import TIE, Trajectory
from core.schemas.experiment import (
    STREAM_DATA,
    STREAM_VERIFY,
    DataConfig,
    ExperimentConfig,
    OffsubspaceTrainConfig,
    SubspaceTrainConfig,
    VerifyScale,
)
from core.schemas.osdnet import EmbeddingConfig, NetConfig
from core.schemas.report import InvariantResult, VerifyReport
from core.schemas.training import CheckpointMetrics
from core.services import (
    dataset_service,
    dynamics_service,
    geometry_service,
    network_service,
    optimizer_service,
    osdnet_service,
    path_service,
    trainer_service,
)

logger = logging.getLogger("flowlab.verify")

MODULES = ("core", "paths", "dynamics", "geometry", "osdnet", "trainer")


@dataclass(frozen=True)
class Outcome:
    measured: float | None
    passed: bool
    detail: str | None = None


@dataclass(frozen=True)
class Streams:
    """The random streams owned by one invariant check."""

    rng_spec: RngSpec
    base: int

    def substream(self, j: int = 0) -> int:
        return self.base + j

    def generator(self, j: int = 0) -> np.random.Generator:
        return self.rng_spec.generator(self.base + j)


@dataclass(frozen=True)
class VerifyContext:
    config: ExperimentConfig
    scale: VerifyScale = "quick"
    perturb: float = 0.0
    threads: int = 1

    @property
    def seed(self) -> int:
        return self.config.seed

    def size(self, quick: int, full: int) -> int:
        return full if self.scale == "full" else quick

    def sparse_data(self) -> DataMatrix:
        cfg = self.config.data if self.config.data.mode == "sparse" else DataConfig()
        return dataset_service.sparse_dataset(
            RngSpec(self.seed, STREAM_DATA), cfg.n_points, cfg.d, cfg.box, cfg.min_separation
        )

    def cluster_data(self) -> tuple[DataMatrix, np.ndarray]:
        cfg = self.config.data if self.config.data.mode == "hierarchical" else DataConfig(mode="hierarchical")
        data = dataset_service.hierarchical_dataset(
            RngSpec(self.seed, STREAM_DATA), np.array(cfg.centers), cfg.cluster_size, cfg.cluster_std
        )
        return data, dataset_service.cluster_labels(cfg)


Check = Callable[[VerifyContext, Streams], Outcome]


@dataclass(frozen=True)
class Invariant:
    module: str
    name: str
    required: str
    check: Check


_REGISTRY: list[Invariant] = []


def invariant(module: str, name: str, required: str) -> Callable[[Check], Check]:
    def register(check: Check) -> Check:
        _REGISTRY.append(Invariant(module, name, required, check))
        return check

    return register


def registered(modules: tuple[str, ...] | list[str] = MODULES) -> list[Invariant]:
    return [inv for inv in _REGISTRY if inv.module in modules]


def _below(measured: float, limit: float, detail: str | None = None) -> Outcome:
    return Outcome(float(measured), bool(measured < limit), detail)


def _cube_data(rng: RngSpec, n: int = 20, d: int = 6, D: int = 3) -> DataMatrix:
    return dataset_service.subspace_cube_dataset(rng, n, d, D)


# core


@invariant("core", "basis orthonormality and reconstruction", "max error < 1e-10, reconstruction < 1e-8")
def _basis_checks(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = _cube_data(RngSpec(ctx.seed, STREAM_VERIFY), n=50, d=12, D=5)
    basis = dataset_service.svd_decompose(data)
    ortho = max(
        np.abs(basis.V.T @ basis.V - np.eye(basis.D)).max(),
        np.abs(basis.Vperp.T @ basis.Vperp - np.eye(basis.d - basis.D)).max(),
        np.abs(basis.V.T @ basis.Vperp).max(),
    )
    recon = np.linalg.norm(basis.V @ basis.R - data.points) / np.linalg.norm(data.points)
    passed = ortho < 1e-10 and recon < 1e-8 and basis.D == 5
    return Outcome(float(max(ortho, recon)), passed, f"D={basis.D}, reconstruction={recon:.2e}")


@invariant("core", "seeded gaussian draws", "identical repeats, |mean| < 0.02")
def _gaussian_draws(ctx: VerifyContext, streams: Streams) -> Outcome:
    rng_spec = RngSpec(ctx.seed, STREAM_VERIFY)
    first = dataset_service.sample_standard_gaussian(rng_spec, 2, 100_000, streams.substream())
    second = dataset_service.sample_standard_gaussian(rng_spec, 2, 100_000, streams.substream())
    worst = float(np.abs(first.mean(axis=1)).max())
    return Outcome(worst, bool(np.array_equal(first, second) and worst < 0.02))


@invariant("core", "dataset CSV round trip", "bit-exact")
def _csv_round_trip(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = DataMatrix(streams.generator().standard_normal((3, 25)) * 1e3)
    text = dataset_service.dataset_to_csv(data)
    again = dataset_service.parse_csv_dataset(text)
    same = np.array_equal(again.points, data.points) and dataset_service.dataset_to_csv(again) == text
    return Outcome(0.0 if same else 1.0, bool(same))


# paths


@invariant("paths", "softmax weights normalised and permutation-equivariant", "error < 1e-12")
def _softmax_checks(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    generator = streams.generator()
    X = generator.standard_normal((data.d, 200)) * 5.0
    worst = 0.0
    order = generator.permutation(data.N)
    permuted = DataMatrix(data.points[:, order])
    for t in (0.0, 0.3, 0.7, 0.95):
        w = path_service.softmax_weights(X, t, data)
        worst = max(worst, float(np.abs(w.sum(axis=0) - 1.0).max()))
        worst = max(worst, float(np.abs(path_service.softmax_weights(X, t, permuted) - w[order]).max()))
    return _below(worst, 1e-12)


@invariant("paths", "optimal velocity equals weighted conditional velocity", "relative error < 1e-12")
def _weighted_average(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    generator = streams.generator()
    worst = 0.0
    for _ in range(ctx.size(50, 500)):
        x = generator.standard_normal(data.d) * 5.0
        t = float(generator.uniform(0.0, 0.9))
        w = path_service.softmax_weights(x, t, data)
        direct = sum(
            w[i] * path_service.conditional_velocity(x, data.column(i), path_service.OT, t) for i in range(data.N)
        )
        v = path_service.optimal_velocity(x, t, data)
        worst = max(worst, float(np.abs(v - direct).max() / (1.0 + np.abs(v).max())))
    return _below(worst, 1e-12)


@invariant("paths", "conditional OT target is x1 − x0", "relative error < 1e-12")
def _ot_target(ctx: VerifyContext, streams: Streams) -> Outcome:
    generator = streams.generator()
    x0 = generator.standard_normal((3, 500))
    x1 = generator.uniform(-10.0, 10.0, (3, 500))
    t = generator.uniform(0.0, 0.99, 500)
    x = (1.0 - t) * x0 + t * x1
    u = path_service.conditional_velocity(x, x1, path_service.OT, t)
    return _below(float((np.abs(u - (x1 - x0)) / (1.0 + np.abs(x1 - x0))).max()), 1e-12)


@invariant("paths", "schedule derivatives match finite differences", "error < 1e-6")
def _schedule_derivatives(ctx: VerifyContext, streams: Streams) -> Outcome:
    x1 = np.array([1.5, -0.5])
    h = 1e-6
    worst = 0.0
    for sched in (OTSchedule(), VPSchedule(beta0=ctx.config.paths.beta0)):
        for t in (0.1, 0.4, 0.8):
            mu_fd = (sched.mu(t + h, x1) - sched.mu(t - h, x1)) / (2 * h)
            sigma_fd = (sched.sigma(t + h) - sched.sigma(t - h)) / (2 * h)
            worst = max(worst, float(np.abs(mu_fd - sched.mu_dt(t, x1)).max()))
            worst = max(worst, abs(float(sigma_fd) - float(sched.sigma_dt(t))))
    return _below(worst, 1e-6)


@invariant("paths", "pushed-forward moments match the marginal", "max z-score ≤ 4")
def _pushforward_moments(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    field = path_service.OptimalField(data)
    n = ctx.size(4_000, 100_000)
    X0 = streams.generator().standard_normal((data.d, n))
    worst = 0.0
    for t in (0.25, 0.5, 0.75):
        X = dynamics_service.flow_map(field, X0, 0.0, t, steps=100)
        mean, cov = path_service.marginal_moments(t, data)
        centred = X - X.mean(axis=1, keepdims=True)
        sample_var = (centred**2).mean(axis=1)
        z_mean = np.abs(X.mean(axis=1) - mean) / np.sqrt(sample_var / n)
        fourth = (centred**4).mean(axis=1)
        z_var = np.abs(sample_var - np.diag(cov)) / np.sqrt((fourth - sample_var**2) / n)
        worst = max(worst, float(z_mean.max()), float(z_var.max()))
    return Outcome(worst, worst <= 4.0)


# dynamics


@invariant("dynamics", "single-point flow is exact", "error < 1e-10")
def _single_point_flow(ctx: VerifyContext, streams: Streams) -> Outcome:
    y = np.array([2.0, -1.0])
    data = DataMatrix(y[:, None])
    grid = dynamics_service.make_grid("uniform", 100, 1e-4)
    x0 = streams.generator().standard_normal(2)
    traj = dynamics_service.integrate_ode(path_service.OptimalField(data), x0, grid, "rk4")
    exact = (1.0 - grid.nodes)[None, :] * x0[:, None] + grid.nodes[None, :] * y[:, None]
    return _below(float(np.abs(traj.states - exact).max()), 1e-10)


@invariant("dynamics", "memorization of sparse data", "snap rate ≥ 0.999, tie rate < 0.001")
def _memorization(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    n = ctx.size(1_000, 10_000)
    eps = ctx.config.dynamics.epsilon
    grid = dynamics_service.make_grid("geometric", 200, eps)
    X0 = streams.generator().standard_normal((data.d, n))
    field = path_service.OptimalField(data)
    terminal = dynamics_service.integrate_batch(field, X0, grid, "rk4")
    snapped = dynamics_service.snap_endpoints(terminal, data, ctx.config.dynamics.snap_tol)
    rate = float(np.mean(dynamics_service.limit_residuals(terminal, data, eps) < 1e-3))
    ties = float(np.mean(snapped == TIE))
    return Outcome(rate, rate >= 0.999 and ties < 0.001, f"tie rate {ties:.4f}")


@invariant("dynamics", "zero-noise SDE equals Euler", "bit-identical")
def _zero_noise_sde(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    grid = dynamics_service.make_grid("uniform", 50, 1e-3)
    x0 = streams.generator().standard_normal(data.d)
    field = path_service.OptimalField(data)
    ode = dynamics_service.integrate_ode(field, x0, grid, "euler")
    sde = dynamics_service.integrate_sde(field, 0.0, x0, grid, RngSpec(ctx.seed, STREAM_VERIFY), streams.substream(1))
    same = np.array_equal(ode.states, sde.states)
    return Outcome(0.0 if same else float(np.abs(ode.states - sde.states).max()), bool(same))


@invariant("dynamics", "flow-map Jacobian of a single point", "error < 1e-6")
def _single_point_jacobian(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = DataMatrix(np.array([[1.0], [3.0]]))
    x = streams.generator().standard_normal(2)
    t = 0.9
    jac = dynamics_service.flow_jacobian_fd(path_service.OptimalField(data), x, 0.0, t)
    return _below(float(np.abs(jac - (1.0 - t) * np.eye(2)).max()), 1e-6)


@invariant("dynamics", "Lipschitz estimate of a linear field", "error < 1e-4")
def _linear_lipschitz(ctx: VerifyContext, streams: Streams) -> Outcome:
    generator = streams.generator()
    A = generator.standard_normal((3, 3))
    samples = generator.standard_normal((3, 5))
    grid = dynamics_service.make_grid("uniform", 4, 0.1)
    estimate = dynamics_service.lipschitz_estimate(lambda x, t: A @ x, samples, grid)
    return _below(abs(estimate - float(np.linalg.norm(A, 2))), 1e-4)


@invariant("dynamics", "deterministic perturbation bound", "log(error) ≤ log(bound) for every start")
def _deterministic_perturbation(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    basis = dataset_service.svd_decompose(data)
    eps = 1e-2
    grid = dynamics_service.make_grid("uniform", 100, eps)
    delta = np.full(basis.D, 0.01 / math.sqrt(basis.D))
    exact = osdnet_service.optimal_field(basis)
    perturbed = osdnet_service.OSDNetField(
        basis,
        osdnet_service.OptimalDiagonal(),
        lambda z, t: osdnet_service.OptimalSubspace.from_basis(basis)(z, t) + delta[:, None],
    )
    X0 = streams.generator().standard_normal((data.d, 100))
    a = dynamics_service.integrate_batch(exact, X0, grid, "rk4")
    b = dynamics_service.integrate_batch(perturbed, X0, grid, "rk4")
    samples = np.concatenate([X0, a], axis=1)
    lipschitz = dynamics_service.lipschitz_estimate(
        exact, samples, dynamics_service.make_grid("uniform", 10, eps)
    )
    log_bound = 2.0 * lipschitz + math.log((1.0 - eps) * (1.0 - eps) * float(delta @ delta))
    log_error = np.log(np.maximum(((a - b) ** 2).sum(axis=0), 1e-300))
    margin = float((log_error - log_bound).max())
    return Outcome(margin, margin <= 0.0, f"L̂={lipschitz:.3g}")


@invariant("dynamics", "stochastic error scales with σ²", "non-negative fit, R² > 0.95")
def _stochastic_scaling(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = DataMatrix(np.array([[1.0], [-2.0]]))
    basis = dataset_service.svd_decompose(data)
    drift = osdnet_service.optimal_field(basis)
    grid = dynamics_service.make_grid("uniform", 100, 1e-2)
    n = ctx.size(1_000, 10_000)
    X0 = streams.generator().standard_normal((data.d, n))
    reference = dynamics_service.integrate_batch(drift, X0, grid, "euler")
    sigmas = [0.01, 0.02, 0.04]
    rng_spec = RngSpec(ctx.seed, STREAM_VERIFY)
    errors = [
        float(
            (
                (dynamics_service.integrate_sde_batch(drift, s, X0, grid, rng_spec, streams.substream(1)) - reference)
                ** 2
            )
            .sum(axis=0)
            .mean()
        )
        for s in sigmas
    ]
    c2, c3, r2 = dynamics_service.fit_noise_scaling(sigmas, errors)
    return Outcome(r2, r2 > 0.95 and c2 >= 0.0 and c3 >= 0.0, f"c2={c2:.4g}, c3={c3:.4g}")


@invariant("dynamics", "flow-map Hessian bound", "FD Hessian ≤ (M/L)(e^{2Lt} − e^{Lt}) + 1e-3")
def _hessian_bound(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = DataMatrix(np.array([[1.0, -1.0], [0.0, 0.0]]))
    field = path_service.OptimalField(data)
    t = 0.5
    x = streams.generator().standard_normal(2) * 0.5
    states = dynamics_service.integrate_ode(field, x, dynamics_service.make_grid("uniform", 20, 1.0 - t)).states
    samples = np.concatenate([states, states + 0.05, states - 0.05], axis=1)
    grid = dynamics_service.make_grid("uniform", 10, 1.0 - t)
    L = dynamics_service.lipschitz_estimate(field, samples, grid)
    M = dynamics_service.hessian_norm_estimate(field, samples, grid)
    hessian = dynamics_service.flow_hessian_fd(field, x, 0.0, t, h=1e-3)
    measured = float(np.linalg.norm(hessian))
    bound = dynamics_service.hessian_bound(L, M, t) + 1e-3
    return Outcome(measured, measured <= bound, f"bound {bound:.4g}")


# geometry


@invariant("geometry", "concentration bound reference values", "0.8251 ± 1e-3 and 0.0750 ± 1e-4")
def _bound_values(ctx: VerifyContext, streams: Streams) -> Outcome:
    a = geometry_service.concentration_bound(0.9, 0.99, 10.0, 6)
    b = geometry_service.concentration_bound(0.99, 0.99, 10.0, 6)
    error = max(abs(a - 0.8251) / 1e-3, abs(b - 0.0750) / 1e-4)
    return Outcome(a, error <= 1.0, f"bound(0.99, 0.99) = {b:.5f}")


@invariant("geometry", "concentration bound dominates Monte Carlo", "p_hat − 3·stderr ≤ bound on the grid")
def _bound_dominance(ctx: VerifyContext, streams: Streams) -> Outcome:
    data = ctx.sparse_data()
    M = geometry_service.min_separation(data)
    cfg = ctx.config.bound_check
    samples = ctx.size(10_000, cfg.samples)
    worst = -math.inf
    # chunk substreams 0, 1, ... of the verify stream, shared by every grid point
    rng_spec = RngSpec(ctx.seed, STREAM_VERIFY)
    for t, tau in itertools.product(cfg.times, cfg.taus):
        bound = geometry_service.concentration_bound(t, tau, M, data.N)
        p_hat, stderr = geometry_service.estimate_nonconcentration(t, tau, data, samples, rng_spec)
        worst = max(worst, p_hat - 3.0 * stderr - bound)
    return Outcome(worst, worst <= 0.0)


@invariant("geometry", "one-dimensional separation time", "|t₁ − 1/3| < 1e-3")
def _interval_separation(ctx: VerifyContext, streams: Streams) -> Outcome:
    S = ConvexRegion.interval(-1.0, 1.0)
    regions = [ConvexRegion.point(np.array([-2.0])), ConvexRegion.point(np.array([2.0]))]
    t1 = geometry_service.separation_time(S, regions, ctx.config.geometry.bisection_tol)
    return Outcome(t1, abs(t1 - 1.0 / 3.0) < 1e-3)


@invariant("geometry", "convex distance symmetry and reference", "|d − 2√2| < 1e-6, symmetric")
def _convex_distance(ctx: VerifyContext, streams: Streams) -> Outcome:
    square = np.array([[-0.5, 0.5, 0.5, -0.5], [-0.5, -0.5, 0.5, 0.5]])
    A = ConvexRegion(square)
    B = ConvexRegion(square + 3.0)
    forward = geometry_service.convex_distance(A, B)
    backward = geometry_service.convex_distance(B, A)
    generator = streams.generator()
    asymmetry = 0.0
    for _ in range(10):
        P = ConvexRegion(generator.standard_normal((2, 5)))
        Q = ConvexRegion(generator.standard_normal((2, 4)) + np.array([[12.0], [0.0]]))
        pq = geometry_service.convex_distance(P, Q)
        qp = geometry_service.convex_distance(Q, P)
        asymmetry = max(asymmetry, abs(pq - qp))
    error = max(abs(forward - 2.0 * math.sqrt(2.0)), abs(forward - backward), asymmetry)
    return _below(error, 1e-6)


@invariant("geometry", "four-cluster separation and confinement", "t₁ < t₂ < 1 and zero violations")
def _cluster_confinement(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, labels = ctx.cluster_data()
    geo = ctx.config.geometry
    source = geometry_service.ball_proxy(data.d, geo.radius_for(data.d), geo.source_vertices)
    hierarchy = geometry_service.hierarchy_from_labels(data, labels, source)
    t1, t2 = geometry_service.hierarchy_separation_times(hierarchy, geo.bisection_tol)
    n = ctx.size(20, geo.confinement_trajectories)
    grid = dynamics_service.make_grid("uniform", ctx.config.dynamics.steps, ctx.config.dynamics.epsilon)
    X0 = streams.generator().standard_normal((data.d, n))
    field = path_service.OptimalField(data)
    states = dynamics_service.integrate_batch_states(field, X0, grid, "rk4")
    violations = 0
    outside = 0
    t_from = min(t1 + geo.confinement_margin, grid.terminal)
    for b in range(n):
        traj = Trajectory(grid.nodes, states[:, :, b].T)
        report = geometry_service.confinement_check(traj, hierarchy, t_from, "group", geo.membership_tol)
        outside += int(report.out_of_support)
        violations += int(not report.confined and not report.out_of_support)
    passed = t1 < t2 < 1.0 and violations == 0
    return Outcome(float(violations), passed, f"t1={t1:.4f}, t2={t2:.4f}, out of support {outside}")


# osdnet


def _osdnet_instance(ctx: VerifyContext) -> tuple[DataMatrix, object]:
    data = _cube_data(RngSpec(ctx.seed, STREAM_DATA), n=20, d=6, D=3)
    return data, dataset_service.svd_decompose(data)


@invariant("osdnet", "optimal parameters reproduce the optimal field", "max error < 1e-9")
def _optimal_identity(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    field = osdnet_service.optimal_field(basis, ctx.perturb)
    generator = streams.generator()
    worst = 0.0
    for _ in range(ctx.size(200, 1_000)):
        x = generator.standard_normal(data.d)
        t = float(generator.uniform(0.0, 0.95))
        worst = max(worst, float(np.abs(field(x, t) - path_service.optimal_velocity(x, t, data)).max()))
    return _below(worst, 1e-9)


@invariant("osdnet", "optimal subspace field is projection invariant", "max error < 1e-9")
def _projection_invariance(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    generator = streams.generator()
    worst = 0.0
    for _ in range(ctx.size(200, 1_000)):
        x = generator.standard_normal(data.d)
        t = float(generator.uniform(0.0, 0.95))
        _, s_full = osdnet_service.optimal_params(t, x, basis, data)
        _, s_proj = osdnet_service.optimal_params(t, basis.V @ basis.project(x), basis, data)
        worst = max(worst, float(np.abs(s_full - s_proj).max()))
    return _below(worst, 1e-9)


@invariant("osdnet", "teacher-student loss vanishes at the optimum", "loss < 1e-20")
def _tst_at_optimum(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    batch = osdnet_service.draw_batch(data, RngSpec(ctx.seed, STREAM_VERIFY), 2_000, 1e-3, streams.substream())
    subspace = osdnet_service.OptimalSubspace.from_basis(basis)
    value, _ = osdnet_service.tst_loss_s(subspace, basis, batch)
    return _below(value, 1e-20)


@invariant("osdnet", "off-subspace loss routes agree", "|mc − exact| ≤ 4·stderr; closed forms within 1e-9")
def _loss_routes(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    k = basis.d - basis.D
    eps = ctx.config.osdnet.loss_epsilon
    c = 0.7
    batch = osdnet_service.draw_batch(
        data, RngSpec(ctx.seed, STREAM_VERIFY), ctx.size(20_000, 100_000), eps, streams.substream()
    )
    embedding = EmbeddingConfig(scale=10.0, dim=8)
    kappa = DiagonalField(streams.generator(1).standard_normal(embedding.dim) * 0.3, embedding)
    closed = max(
        abs(osdnet_service.loss_O_exact(lambda t: np.zeros_like(t), k, 256) - k),
        abs(osdnet_service.loss_O_exact(lambda t: np.full_like(t, c), k, 256) - (c * c / 3 + c + 1) * k),
    )
    worst_z = 0.0
    for O in (lambda t: np.zeros_like(t), lambda t: np.full_like(t, c), kappa):
        mc, stderr = osdnet_service.loss_O_mc(O, basis, batch)
        exact = osdnet_service.loss_O_exact(O, k, 512, upper=1.0 - eps)
        worst_z = max(worst_z, abs(mc - exact) / stderr)
    return Outcome(worst_z, worst_z <= 4.0 and closed < 1e-9, f"closed-form error {closed:.2e}")


@invariant("osdnet", "gradients match central differences", "max relative error < 1e-4")
def _gradient_check(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    rng_spec = RngSpec(ctx.seed, STREAM_VERIFY)
    generator = streams.generator()
    embedding = EmbeddingConfig(scale=10.0, dim=8)
    net = network_service.init_net(basis.D, NetConfig(hidden=12, blocks=2, embedding=embedding), rng_spec, streams.substream(1))
    batch = osdnet_service.draw_batch(data, rng_spec, 16, 1e-2, streams.substream(2))
    _, grads = osdnet_service.tst_loss_s_grad(net, basis, batch)
    worst = 0.0
    names = sorted(net.params)
    for _ in range(50):
        name = names[generator.integers(len(names))]
        index = tuple(generator.integers(s) for s in net.params[name].shape)
        h = 1e-5
        plus = {k: v.copy() for k, v in net.params.items()}
        minus = {k: v.copy() for k, v in net.params.items()}
        plus[name][index] += h
        minus[name][index] -= h
        fd = (
            osdnet_service.tst_loss_s(net.with_params(plus), basis, batch)[0]
            - osdnet_service.tst_loss_s(net.with_params(minus), basis, batch)[0]
        ) / (2 * h)
        worst = max(worst, abs(fd - grads[name][index]) / max(1.0, abs(fd)))
    O = DiagonalField(generator.standard_normal(embedding.dim) * 0.1, embedding)
    _, kappa_grad = osdnet_service.loss_O_grad(O, basis, batch)
    for j in range(embedding.dim):
        step = np.zeros(embedding.dim)
        step[j] = 1e-6
        fd = (
            osdnet_service.loss_O_mc(DiagonalField(O.kappa + step, embedding), basis, batch)[0]
            - osdnet_service.loss_O_mc(DiagonalField(O.kappa - step, embedding), basis, batch)[0]
        ) / 2e-6
        worst = max(worst, abs(fd - kappa_grad["kappa"][j]) / max(1.0, abs(fd)))
    return _below(worst, 1e-4)


@invariant("osdnet", "CFM gradients decouple", "relative cross-dependence < 1e-10, κ-gradient equals loss_O gradient")
def _cfm_decoupling(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    rng_spec = RngSpec(ctx.seed, STREAM_VERIFY)
    embedding = EmbeddingConfig(scale=10.0, dim=8)
    config = NetConfig(hidden=12, blocks=1, embedding=embedding)
    batch = osdnet_service.draw_batch(data, rng_spec, 256, 1e-3, streams.substream())
    generator = streams.generator(1)
    nets = [network_service.init_net(basis.D, config, rng_spec, streams.substream(2 + i)) for i in range(2)]
    diagonals = [DiagonalField(generator.standard_normal(embedding.dim) * 0.2, embedding) for _ in range(2)]
    grads = {
        (i, j): osdnet_service.cfm_loss_grads(basis, OSDNetParams(diagonals[i], nets[j]), batch)
        for i in range(2)
        for j in range(2)
    }

    def gap(a: np.ndarray, b: np.ndarray) -> float:
        return float(np.abs(a - b).max() / (1.0 + np.abs(b).max()))

    cross = 0.0
    for i in range(2):
        cross = max(cross, gap(grads[(i, 0)][1]["kappa"], grads[(i, 1)][1]["kappa"]))
        for name in nets[0].params:
            cross = max(cross, gap(grads[(0, i)][2][name], grads[(1, i)][2][name]))
    _, off_grad = osdnet_service.loss_O_grad(diagonals[0], basis, batch)
    route = gap(off_grad["kappa"], grads[(0, 0)][1]["kappa"])
    return _below(max(cross, route), 1e-10)


@invariant("osdnet", "CFM minus decomposed loss is parameter independent", "agreement within 3 pooled stderr")
def _cfm_constant(ctx: VerifyContext, streams: Streams) -> Outcome:
    data, basis = _osdnet_instance(ctx)
    rng_spec = RngSpec(ctx.seed, STREAM_VERIFY)
    embedding = EmbeddingConfig(scale=10.0, dim=8)
    config = NetConfig(hidden=8, blocks=1, embedding=embedding)
    batch = osdnet_service.draw_batch(data, rng_spec, ctx.size(20_000, 100_000), 1e-2, streams.substream())
    target = osdnet_service.subspace_target(basis, batch)
    generator = streams.generator(1)
    means, errors = [], []
    for i in range(5):
        net = network_service.init_net(basis.D, config, rng_spec, streams.substream(2 + i))
        O = DiagonalField(generator.standard_normal(embedding.dim) * 0.2, embedding)
        u = path_service.conditional_velocity(batch.x, batch.x1, path_service.OT, batch.t)
        residual = osdnet_service.osdnet_field(basis, OSDNetParams(O, net))(batch.x, batch.t) - u
        y = basis.project_perp(batch.x)
        off = (osdnet_service.diagonal_values(O, batch.t) + 1.0 / (1.0 - batch.t)) * y
        sub = network_service.net_forward(basis.project(batch.x), batch.t, net) - target
        per_sample = (residual**2).sum(axis=0) - (off**2).sum(axis=0) - (sub**2).sum(axis=0)
        means.append(float(per_sample.mean()))
        errors.append(float(per_sample.std(ddof=1) / math.sqrt(batch.size)))
    worst = max(abs(means[i] - means[0]) / math.sqrt(errors[i] ** 2 + errors[0] ** 2) for i in range(1, 5))
    return Outcome(worst, worst < 3.0)


@invariant("osdnet", "closed-form κ limit and flow", "residual < 1e-10, flow vs GD < 1e-5, factor routes < 1e-8")
def _kappa_closed_form(ctx: VerifyContext, streams: Streams) -> Outcome:
    cfg = EmbeddingConfig(scale=1.0, dim=2)
    q = osdnet_service.compute_quadratic_data(cfg, 256)
    kappa = osdnet_service.kappa_limit(q, strict=True)
    residual = float(np.linalg.norm(q.A @ kappa + q.b))
    e_error = float(np.abs(q.e - np.array([1.0 - math.cos(1.0), math.sin(1.0)])).max())

    offset = np.array([1.0, 0.0])
    start = kappa + offset
    eta, steps = 2e-5, ctx.size(25_000, 100_000)
    iterate = start.copy()
    for _ in range(steps):
        iterate = iterate - eta * osdnet_service.reduced_loss_grad(iterate, q)
    flows = (
        osdnet_service.kappa_flow(eta * steps, offset, q),
        osdnet_service.kappa_flow_from(eta * steps, start, q),
    )
    gd_error = max(float(np.abs(flow - iterate).max()) for flow in flows)

    factor = osdnet_service.offsubspace_limit_factor(q)
    route = abs(osdnet_service.diagonal_exponential(DiagonalField(kappa, cfg), 256) - factor)
    passed = residual < 1e-10 and gd_error < 1e-5 and route < 1e-8 and e_error < 1e-9 and factor > 0
    return Outcome(max(residual, gd_error, route), passed, f"limit factor {factor:.6g}")


@invariant("osdnet", "s=1000 embedding fits 1/(1−t) better than s=1", "weighted error ratio < 1 for every dim")
def _embedding_scales(ctx: VerifyContext, streams: Streams) -> Outcome:
    cfg = ctx.config.emb_approx
    dims = cfg.dims if ctx.scale == "full" else cfg.dims[:2]
    worst = 0.0
    for dim in dims:
        errors = []
        for scale in (1.0, 1000.0):
            emb_cfg = EmbeddingConfig(scale=scale, wavelength=cfg.wavelength, dim=dim)
            q = osdnet_service.compute_quadratic_data(emb_cfg, cfg.panels)
            errors.append(osdnet_service.weighted_limit_error(q, emb_cfg, cfg.error_upper, cfg.panels))
        worst = max(worst, errors[1] / errors[0])
    return _below(worst, 1.0)


# trainer


@invariant("trainer", "SGD contracts a quadratic by 1 − lr", "|factor − 0.9| < 1e-15")
def _sgd_factor(ctx: VerifyContext, streams: Streams) -> Outcome:
    p = {"p": np.array([3.0, -2.0])}
    worst = 0.0
    for _ in range(5):
        nxt = optimizer_service.sgd_step(p, {"p": p["p"]}, 0.1)
        worst = max(worst, float(np.abs(nxt["p"] / p["p"] - 0.9).max()))
        p = nxt
    return _below(worst, 1e-15)


@invariant("trainer", "AdamW first step is about lr", "|step| within 1% of lr")
def _adamw_first_step(ctx: VerifyContext, streams: Streams) -> Outcome:
    worst = 0.0
    for scale in (1e-3, 1.0, 1e3):
        params = {"w": np.ones(4)}
        grads = {"w": scale * np.array([1.0, -2.0, 0.5, 3.0])}
        new, _ = optimizer_service.adamw_step(params, grads, optimizer_service.AdamWState(), 1e-3, weight_decay=0.0)
        worst = max(worst, float(np.abs(np.abs(new["w"] - 1.0) / 1e-3 - 1.0).max()))
    return _below(worst, 0.01)


def _tiny_run(ctx: VerifyContext, epochs: int) -> trainer_service.TrainingRun:
    config = OffsubspaceTrainConfig(
        epochs=epochs, checkpoint_every=max(epochs // 4, 1), batch=256, checkpoint_samples=200, d=8, D=3, n_points=20
    )
    data, basis = trainer_service.training_dataset(config, ctx.seed)
    embedding = EmbeddingConfig(scale=1000.0, dim=16)
    return trainer_service.offsubspace_run(data, basis, embedding, config, RngSpec(ctx.seed, STREAM_VERIFY))


@invariant("trainer", "off-subspace training lowers loss and off-norms", "negative loss slope, falling off-norm mean")
def _offsubspace_progress(ctx: VerifyContext, streams: Streams) -> Outcome:
    run = _tiny_run(ctx, ctx.size(200, 2_000))
    metrics = trainer_service.run_training(run)
    slope = trainer_service.trend_slope([m.loss for m in metrics])
    norms = [m.off_norms.mean for m in metrics]
    return Outcome(slope, slope < 0.0 and norms[-1] < norms[0], f"off-norm mean {norms[0]:.3f} → {norms[-1]:.3f}")


def _unit_embedding_run(
    ctx: VerifyContext, epochs: int, learning_rate: float, kappa0: np.ndarray | None = None
) -> trainer_service.TrainingRun:
    # two-entry s=1 embedding: A is well conditioned and SGD reaches κ_∞ within a few thousand steps
    config = OffsubspaceTrainConfig(
        learning_rate=learning_rate,
        epochs=epochs,
        checkpoint_every=max(epochs // 4, 1),
        batch=256,
        checkpoint_samples=ctx.size(1_000, 5_000),
        sample_steps=200,
        d=8,
        D=3,
        n_points=20,
    )
    data, basis = trainer_service.training_dataset(config, ctx.seed)
    embedding = EmbeddingConfig(scale=1.0, dim=2)
    rng = RngSpec(ctx.seed, STREAM_VERIFY)
    return trainer_service.offsubspace_run(data, basis, embedding, config, rng, kappa0)


@invariant(
    "trainer",
    "off-subspace training settles at the limit factor",
    "final off-norm mean within ×2 of factor·E‖g‖; flat when started at κ_∞",
)
def _offsubspace_limit(ctx: VerifyContext, streams: Streams) -> Outcome:
    run = _unit_embedding_run(ctx, ctx.size(3_000, 6_000), 0.2)
    q = osdnet_service.compute_quadratic_data(run.embedding, ctx.config.osdnet.panels)
    k = run.basis.d - run.basis.D
    prediction = osdnet_service.offsubspace_limit_factor(q) * osdnet_service.chi_mean(k)
    final = trainer_service.run_training(run)[-1].off_norms.mean
    ratio = final / prediction

    settled = _unit_embedding_run(ctx, ctx.size(200, 1_000), 0.02, osdnet_service.kappa_limit(q))
    history = trainer_service.run_training(settled)
    losses = np.array([m.loss for m in history])
    norms = np.array([m.off_norms.mean for m in history])
    drift = max(float(np.ptp(losses) / losses[0]), float(np.ptp(norms) / norms[0]))
    passed = 0.5 <= ratio <= 2.0 and drift < 0.1
    return Outcome(ratio, passed, f"measured {final:.4f} vs limit {prediction:.4f}, drift from κ_∞ {drift:.3g}")


@functools.lru_cache(maxsize=4)
def _subspace_history(seed: int, scale: VerifyScale) -> tuple[CheckpointMetrics, ...]:
    full = scale == "full"
    epochs = 2_000 if full else 400
    config = SubspaceTrainConfig(
        learning_rate=1e-3,
        epochs=epochs,
        checkpoint_every=epochs // 20,
        batch=256,
        checkpoint_samples=1_000 if full else 300,
        sample_steps=20,
        d=2,
        D=2,
        n_points=8,
    )
    net = NetConfig(hidden=32, blocks=1, embedding=EmbeddingConfig(scale=1.0, dim=16))
    data, basis = trainer_service.training_dataset(config, seed)
    run = trainer_service.subspace_run(data, basis, net, config, RngSpec(seed, STREAM_VERIFY))
    return tuple(trainer_service.run_training(run))


@invariant(
    "trainer",
    "subspace training lowers loss and approaches the data",
    "negative loss slope, falling mean nearest-data distance",
)
def _subspace_progress(ctx: VerifyContext, streams: Streams) -> Outcome:
    history = _subspace_history(ctx.seed, ctx.scale)
    slope = trainer_service.trend_slope([m.loss for m in history])
    nearest = [m.nearest_data_distance for m in history]
    passed = slope < 0.0 and nearest[-1] < nearest[0]
    return Outcome(slope, passed, f"nearest-data distance {nearest[0]:.3f} → {nearest[-1]:.3f}")


@invariant(
    "trainer",
    "generation error tracks the subspace loss",
    "rank correlation > 0.8 over ≥ 20 checkpoints, MSE ≤ 3·C·loss with C from the first",
)
def _mse_tracks_loss(ctx: VerifyContext, streams: Streams) -> Outcome:
    history = _subspace_history(ctx.seed, ctx.scale)
    rho = trainer_service.rank_correlation([m.mse_to_optimal for m in history], [m.loss for m in history])
    C, worst = trainer_service.mse_loss_constant(history)
    passed = len(history) >= 20 and rho > 0.8 and worst <= 3.0
    return Outcome(rho, passed, f"C = {C:.4g}, largest later ratio {worst:.3f}·C")


@invariant("trainer", "checkpoint round trip and resume", "byte-identical files, bit-identical resume")
def _checkpoint_resume(ctx: VerifyContext, streams: Streams) -> Outcome:
    straight = _tiny_run(ctx, 40)
    trainer_service.run_training(straight, epochs=40)
    halfway = _tiny_run(ctx, 40)
    trainer_service.run_training(halfway, epochs=20)
    text = trainer_service.checkpoint_json(trainer_service.to_checkpoint(halfway))
    restored = trainer_service.parse_checkpoint(text)
    same_file = trainer_service.checkpoint_json(restored) == text
    resumed = trainer_service.restore_run(restored, halfway.data, halfway.basis)
    trainer_service.run_training(resumed, epochs=40)
    same_params = np.array_equal(resumed.params["kappa"], straight.params["kappa"])
    return Outcome(0.0 if same_file and same_params else 1.0, bool(same_file and same_params))


def _run_one(ctx: VerifyContext, index: int, inv: Invariant) -> InvariantResult:
    streams = Streams(RngSpec(ctx.seed, STREAM_VERIFY), base=1_000 * (index + 1))
    try:
        outcome = inv.check(ctx, streams)
    except FlowlabError as exc:
        outcome = Outcome(None, False, f"{exc.code}: {exc.message}")
    if not np.isfinite(outcome.measured if outcome.measured is not None else 0.0):
        outcome = Outcome(outcome.measured, False, outcome.detail)
    level = logging.INFO if outcome.passed else logging.WARNING
    logger.log(level, "[%s] %s: %s (measured %s)", inv.module, inv.name, "pass" if outcome.passed else "FAIL", outcome.measured)
    return InvariantResult(
        module=inv.module,
        name=inv.name,
        passed=outcome.passed,
        measured=outcome.measured,
        required=inv.required,
        detail=outcome.detail,
    )


def run_verify(ctx: VerifyContext, modules: tuple[str, ...] | list[str] | None = None) -> VerifyReport:
    """Run every registered invariant of the selected modules."""
    selected = tuple(modules if modules is not None else ctx.config.verify.modules)
    results = [_run_one(ctx, i, inv) for i, inv in enumerate(_REGISTRY) if inv.module in selected]
    report = VerifyReport(
        passed=all(r.passed for r in results), scale=ctx.scale, seed=ctx.seed, results=results
    )
    logger.info("%d of %d invariants passed", sum(r.passed for r in results), len(results))
    return report
