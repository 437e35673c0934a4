from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from core.errors import IllConditionedError, InvalidArgumentError, QuadratureError
from core.models.data import DataMatrix, RngSpec, SubspaceBasis
from core.models.network import DiagonalField, OSDNetParams, Params, QuadraticData, SubspaceNet
from core.models.schedule import PathSchedule, Time
from core.schemas.osdnet import EmbeddingConfig
from core.services.network_service import emb, net_backward, net_forward, net_forward_cached
from core.services.path_service import (
    OT,
    as_batch,
    check_time,
    conditional_velocity,
    optimal_velocity,
    softmax_weights,
    time_row,
)

logger = logging.getLogger("flowlab.osdnet")

# A is treated as numerically singular beyond this condition number
MAX_CONDITION = 1e12
_GAUSS_NODES = 8

SubspaceComponent = Callable[[np.ndarray, Time], np.ndarray]
DiagonalFunction = Callable[[np.ndarray], np.ndarray | float]


def _t_column(t: Time) -> np.ndarray | float:
    return float(t) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)


def diagonal_values(O: DiagonalField, t: Time) -> np.ndarray | float:
    """ô_t: a scalar (or one value per column) in shared mode, (d−D,) or (d−D)×B per entry."""
    E = emb(t, O.embedding)
    if O.shared:
        out = O.kappa @ E
        return float(out) if np.ndim(out) == 0 else out
    return O.per_entry @ E


@dataclass(frozen=True)
class OptimalDiagonal:
    """Ô*_t = −I/(1−t)."""

    def __call__(self, t: Time) -> np.ndarray | float:
        check_time(t)
        return -1.0 / (1.0 - _t_column(t))


@dataclass(frozen=True)
class LearnedDiagonal:
    field: DiagonalField

    def __call__(self, t: Time) -> np.ndarray | float:
        return diagonal_values(self.field, t)


@dataclass(frozen=True)
class OptimalSubspace:
    """ŝ*_t on subspace coordinates z = Vᵀx: (R·w − z)/(1−t), weights from the columns of R.

    ``offset`` is added to every output (a perturbed optimal instance).
    """

    coordinates: DataMatrix
    offset: float = 0.0

    @classmethod
    def from_basis(cls, basis: SubspaceBasis, offset: float = 0.0) -> OptimalSubspace:
        return cls(DataMatrix(basis.R), offset)

    def __call__(self, z: np.ndarray, t: Time) -> np.ndarray:
        out = optimal_velocity(z, t, self.coordinates, OT)
        return out + self.offset if self.offset else out


@dataclass(frozen=True)
class NetSubspace:
    net: SubspaceNet

    def __call__(self, z: np.ndarray, t: Time) -> np.ndarray:
        return net_forward(z, t, self.net)


@dataclass(frozen=True)
class OSDNetField:
    """v̂_t(x) = Vperp·Ô_t·Vperpᵀx + V·ŝ_t(Vᵀx)."""

    basis: SubspaceBasis
    diagonal: Callable[[Time], np.ndarray | float]
    subspace: SubspaceComponent

    def __call__(self, x: np.ndarray, t: Time) -> np.ndarray:
        X, single = as_batch(x)
        if X.shape[0] != self.basis.d:
            raise InvalidArgumentError("state dimension does not match the basis")
        t = time_row(t, X.shape[1])
        out = self.basis.V @ self.subspace(self.basis.project(X), t)
        if self.basis.d > self.basis.D:
            o_hat = np.asarray(self.diagonal(t))
            if o_hat.ndim == 1 and np.ndim(t) == 0:
                o_hat = o_hat[:, None]
            off = o_hat * self.basis.project_perp(X)
            out = out + self.basis.Vperp @ off
        return out[:, 0] if single else out


def optimal_field(basis: SubspaceBasis, offset: float = 0.0) -> OSDNetField:
    return OSDNetField(basis, OptimalDiagonal(), OptimalSubspace.from_basis(basis, offset))


def osdnet_field(basis: SubspaceBasis, params: OSDNetParams) -> OSDNetField:
    return OSDNetField(basis, LearnedDiagonal(params.diagonal), NetSubspace(params.net))


def osdnet_eval(
    x: np.ndarray,
    t: Time,
    basis: SubspaceBasis,
    O: DiagonalField | Callable[[Time], np.ndarray | float],
    s_net: SubspaceNet | SubspaceComponent,
) -> np.ndarray:
    diagonal = LearnedDiagonal(O) if isinstance(O, DiagonalField) else O
    subspace = NetSubspace(s_net) if isinstance(s_net, SubspaceNet) else s_net
    return OSDNetField(basis, diagonal, subspace)(x, t)


def optimal_params(
    t: float, x: np.ndarray, basis: SubspaceBasis, data: DataMatrix
) -> tuple[float, np.ndarray]:
    """(ô*_t, ŝ*_t(x)) with ŝ* = (R·w_t(x) − Vᵀx)/(1−t) and w_t from the full data."""
    check_time(t)
    w = softmax_weights(x, t, data, OT)
    s_star = (basis.R @ w - basis.project(np.asarray(x, dtype=np.float64))) / (1.0 - t)
    return -1.0 / (1.0 - t), s_star


def endpoint_decompose(x_end: np.ndarray, basis: SubspaceBasis) -> tuple[np.ndarray, np.ndarray, float]:
    x_end = np.asarray(x_end, dtype=np.float64)
    sub = basis.V @ basis.project(x_end)
    off = basis.Vperp @ basis.project_perp(x_end)
    return sub, off, float(np.linalg.norm(off))


def gauss_legendre(panels: int, lower: float = 0.0, upper: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of composite 8-point Gauss–Legendre on [lower, upper]."""
    if panels < 1:
        raise InvalidArgumentError("panels must be at least 1")
    x, w = np.polynomial.legendre.leggauss(_GAUSS_NODES)
    edges = np.linspace(lower, upper, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _integrals(cfg: EmbeddingConfig, panels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nodes, weights = gauss_legendre(panels)
    E = emb(nodes, cfg)
    decay = 1.0 - nodes
    A = (E * (weights * decay**2)) @ E.T
    b = E @ (weights * decay)
    e = E @ weights
    return 0.5 * (A + A.T), b, e


def compute_quadratic_data(
    cfg: EmbeddingConfig, panels: int = 2048, certify_tol: float = 1e-9
) -> QuadraticData:
    """A = ∫(1−t)²emb·embᵀ, b = ∫(1−t)emb, e = ∫emb over [0, 1], certified against
    the same quadrature with twice the panels."""
    A, b, e = _integrals(cfg, panels)
    A2, b2, e2 = _integrals(cfg, 2 * panels)
    drift = max(np.abs(A - A2).max(), np.abs(b - b2).max(), np.abs(e - e2).max())
    if drift > certify_tol:
        raise QuadratureError(
            "quadrature did not converge under panel doubling",
            {"panels": panels, "difference": float(drift)},
        )
    logger.debug("Quadrature with %d panels certified (difference %.2e)", panels, drift)
    return QuadraticData(A=A, b=b, e=e, panels=panels)


def _eigen(q: QuadraticData) -> tuple[np.ndarray, np.ndarray]:
    values, vectors = linalg.eigh(q.A)
    return np.maximum(values, 0.0), vectors


def condition_number(q: QuadraticData) -> float:
    values = linalg.eigvalsh(q.A)
    if values[0] <= 0.0:
        return math.inf
    return float(values[-1] / values[0])


def needs_pseudo_inverse(q: QuadraticData) -> bool:
    return condition_number(q) > MAX_CONDITION


def kappa_limit(q: QuadraticData, strict: bool = False) -> np.ndarray:
    """κ_∞ = −A⁻¹b by Cholesky; numerically singular A falls back to a truncated
    pseudo-inverse (or raises when ``strict``)."""
    cond = condition_number(q)
    if cond <= MAX_CONDITION:
        return -linalg.cho_solve(linalg.cho_factor(q.A), q.b)
    if strict:
        raise IllConditionedError("A is numerically singular", {"condition": cond})
    logger.warning("A is ill-conditioned (cond=%.3g); using a truncated pseudo-inverse", cond)
    values, vectors = _eigen(q)
    keep = values > values[-1] / MAX_CONDITION
    coefficients = (vectors[:, keep].T @ q.b) / values[keep]
    return -vectors[:, keep] @ coefficients


def kappa_flow(tau: float, c: np.ndarray, q: QuadraticData) -> np.ndarray:
    """κ(τ) = exp(−2Aτ)·c − A⁻¹b."""
    if tau < 0:
        raise InvalidArgumentError("tau must be non-negative")
    values, vectors = _eigen(q)
    return vectors @ (np.exp(-2.0 * values * tau) * (vectors.T @ c)) + kappa_limit(q)


def kappa_flow_from(tau: float, kappa0: np.ndarray, q: QuadraticData) -> np.ndarray:
    """Gradient flow of the reduced loss started at κ₀.

    Along each eigenvector of A the flow is exact, including near-zero eigenvalues
    where the drift (1 − e^{−2λτ})/λ tends to 2τ.
    """
    if tau < 0:
        raise InvalidArgumentError("tau must be non-negative")
    values, vectors = _eigen(q)
    decay = np.exp(-2.0 * values * tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        drift = np.where(values > 0.0, -np.expm1(-2.0 * values * tau) / values, 2.0 * tau)
    return vectors @ (decay * (vectors.T @ kappa0) - drift * (vectors.T @ q.b))


def reduced_loss(kappa: np.ndarray, q: QuadraticData) -> float:
    """∫₀¹(1−t)²(κᵀemb + 1/(1−t))²dt = κᵀAκ + 2bᵀκ + 1."""
    return float(kappa @ q.A @ kappa + 2.0 * q.b @ kappa + 1.0)


def reduced_loss_grad(kappa: np.ndarray, q: QuadraticData) -> np.ndarray:
    return 2.0 * (q.A @ kappa + q.b)


def offsubspace_limit_factor(q: QuadraticData) -> float:
    """exp(−bᵀA⁻¹e): the multiplier of Vperp·Vperpᵀx at the gradient-flow limit."""
    return float(np.exp(kappa_limit(q) @ q.e))


def diagonal_integral(O: DiagonalField, panels: int = 2048, upper: float = 1.0) -> np.ndarray | float:
    nodes, weights = gauss_legendre(panels, 0.0, upper)
    integral = emb(nodes, O.embedding) @ weights
    if O.shared:
        return float(O.kappa @ integral)
    return O.per_entry @ integral


def diagonal_exponential(O: DiagonalField, panels: int = 2048, upper: float = 1.0) -> np.ndarray | float:
    """exp(∫₀^upper ô_t dt): the commuting time-ordered exponential of Ô. Per-entry
    fields give one factor per diagonal entry."""
    integral = diagonal_integral(O, panels, upper)
    return float(np.exp(integral)) if O.shared else np.exp(integral)


def chi_mean(k: int) -> float:
    """E‖g‖ for g ~ N(0, I_k)."""
    if k == 0:
        return 0.0
    return float(math.sqrt(2.0) * np.exp(gammaln((k + 1) / 2.0) - gammaln(k / 2.0)))


def predicted_off_norm_mean(O: DiagonalField, k: int, panels: int = 2048, upper: float = 1.0) -> float:
    """Mean off-subspace norm of generated samples under the diagonal field Ô."""
    return float(np.mean(diagonal_exponential(O, panels, upper))) * chi_mean(k)


def limit_curve(q: QuadraticData, cfg: EmbeddingConfig, t: np.ndarray) -> np.ndarray:
    """ô_t = κ_∞ᵀemb(t) on the given times."""
    return kappa_limit(q) @ emb(np.asarray(t, dtype=np.float64), cfg)


def weighted_limit_error(
    q: QuadraticData, cfg: EmbeddingConfig, upper: float = 0.9, panels: int = 2048
) -> float:
    """∫₀^upper (1−t)²(|κ_∞ᵀemb(t)| − 1/(1−t))² dt."""
    nodes, weights = gauss_legendre(panels, 0.0, upper)
    residual = np.abs(limit_curve(q, cfg, nodes)) - 1.0 / (1.0 - nodes)
    return float(((1.0 - nodes) ** 2 * residual**2) @ weights)


def sign_changes(values: np.ndarray) -> int:
    signs = np.sign(values)
    signs = signs[signs != 0]
    return int(np.count_nonzero(signs[1:] != signs[:-1]))


@dataclass(frozen=True)
class TrainingBatch:
    """Monte-Carlo draw (t, x₀, x₁, x) with x = (1−t)x₀ + t·x₁ on the OT conditional path."""

    t: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    labels: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return (1.0 - self.t) * self.x0 + self.t * self.x1

    @property
    def size(self) -> int:
        return self.t.size


def draw_batch(
    data: DataMatrix, rng: RngSpec, count: int, epsilon: float = 1e-3, substream: int | None = None
) -> TrainingBatch:
    """t ~ U[0, 1−ε], x₁ uniform over the data, x₀ ~ N(0, I)."""
    if count < 1:
        raise InvalidArgumentError("count must be positive")
    generator = rng.generator(substream)
    t = generator.uniform(0.0, 1.0 - epsilon, size=count)
    labels = generator.integers(0, data.N, size=count)
    x0 = generator.standard_normal((data.d, count))
    return TrainingBatch(t=t, x0=x0, x1=data.points[:, labels], labels=labels)


def _mean_and_stderr(per_sample: np.ndarray) -> tuple[float, float]:
    n = per_sample.size
    stderr = float(per_sample.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(per_sample.mean()), stderr


def subspace_target(basis: SubspaceBasis, batch: TrainingBatch) -> np.ndarray:
    return OptimalSubspace.from_basis(basis)(basis.project(batch.x), batch.t)


def tst_loss_s(
    subspace: SubspaceNet | SubspaceComponent,
    basis: SubspaceBasis,
    batch: TrainingBatch,
    target: np.ndarray | None = None,
) -> tuple[float, float]:
    """E‖ŝ_t(x) − ŝ*_t(x)‖² over the batch, with its standard error."""
    component = NetSubspace(subspace) if isinstance(subspace, SubspaceNet) else subspace
    target = subspace_target(basis, batch) if target is None else target
    residual = component(basis.project(batch.x), batch.t) - target
    return _mean_and_stderr((residual**2).sum(axis=0))


def tst_loss_s_grad(
    net: SubspaceNet, basis: SubspaceBasis, batch: TrainingBatch, target: np.ndarray | None = None
) -> tuple[float, Params]:
    """Batch-mean loss and its gradient with respect to every network parameter."""
    target = subspace_target(basis, batch) if target is None else target
    z = basis.project(batch.x)
    out, cache = net_forward_cached(z, batch.t, net)
    residual = out - target
    grads, _ = net_backward(z, batch.t, net, 2.0 * residual / batch.size, cache)
    return float((residual**2).sum(axis=0).mean()), grads


def _diagonal_at(O: DiagonalField | DiagonalFunction, t: np.ndarray) -> np.ndarray:
    if isinstance(O, DiagonalField):
        return np.asarray(diagonal_values(O, t))
    return np.broadcast_to(np.asarray(O(t), dtype=np.float64), np.shape(t))


def _off_residual(
    O: DiagonalField | DiagonalFunction, basis: SubspaceBasis, batch: TrainingBatch
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = basis.project_perp(batch.x)
    o_hat = _diagonal_at(O, batch.t)
    coefficient = o_hat + 1.0 / (1.0 - batch.t)
    return y, coefficient, coefficient * y


def loss_O_mc(
    O: DiagonalField | DiagonalFunction, basis: SubspaceBasis, batch: TrainingBatch
) -> tuple[float, float]:
    """E‖Vperp(Ô_t + I/(1−t))Vperpᵀx‖² over the batch, with its standard error.

    ``O`` may also be a callable t ↦ ô_t shared by every diagonal entry.
    """
    _, _, residual = _off_residual(O, basis, batch)
    return _mean_and_stderr((residual**2).sum(axis=0))


def loss_O_grad(O: DiagonalField, basis: SubspaceBasis, batch: TrainingBatch) -> tuple[float, Params]:
    y, coefficient, residual = _off_residual(O, basis, batch)
    E = emb(batch.t, O.embedding)
    value = float((residual**2).sum(axis=0).mean())
    if O.shared:
        weights = 2.0 * coefficient * (y**2).sum(axis=0) / batch.size
        return value, {"kappa": E @ weights}
    return value, {"per_entry": (2.0 * coefficient * y**2) @ E.T / batch.size}


def loss_O_exact(
    O: DiagonalField | DiagonalFunction,
    k: int,
    panels: int = 2048,
    upper: float = 1.0,
) -> float:
    """Mean of ‖(1−t)Ô_t + I‖²_F over t ~ U[0, upper]; for upper = 1 this is ∫₀¹.

    ``O`` may be a DiagonalField or a callable t ↦ ô_t (values shared by the k entries).
    """
    if not 0.0 < upper <= 1.0:
        raise InvalidArgumentError("upper must lie in (0, 1]")
    nodes, weights = gauss_legendre(panels, 0.0, upper)
    values = _diagonal_at(O, nodes)
    if values.ndim == 1:
        integrand = k * ((1.0 - nodes) * values + 1.0) ** 2
    else:
        integrand = (((1.0 - nodes) * values + 1.0) ** 2).sum(axis=0)
    return float(integrand @ weights / upper)


def cfm_loss(
    field: OSDNetField, batch: TrainingBatch, sched: PathSchedule = OT
) -> tuple[float, float]:
    """E‖v̂_t(x) − u_t(x|x₁)‖² over the batch, with its standard error."""
    residual = field(batch.x, batch.t) - conditional_velocity(batch.x, batch.x1, sched, batch.t)
    return _mean_and_stderr((residual**2).sum(axis=0))


def cfm_loss_grads(
    basis: SubspaceBasis, params: OSDNetParams, batch: TrainingBatch
) -> tuple[float, Params, Params]:
    """CFM loss on the OT path with gradients for κ (or per-entry rows) and the network."""
    x = batch.x
    z = basis.project(x)
    y = basis.project_perp(x)
    out, cache = net_forward_cached(z, batch.t, params.net)
    o_hat = np.asarray(diagonal_values(params.diagonal, batch.t))
    v_hat = basis.V @ out + basis.Vperp @ (o_hat * y)
    residual = v_hat - conditional_velocity(x, batch.x1, OT, batch.t)
    value = float((residual**2).sum(axis=0).mean())

    off = basis.project_perp(residual)
    E = emb(batch.t, params.diagonal.embedding)
    if params.diagonal.shared:
        diag_grads = {"kappa": E @ (2.0 * (off * y).sum(axis=0) / batch.size)}
    else:
        diag_grads = {"per_entry": (2.0 * off * y) @ E.T / batch.size}
    net_grads, _ = net_backward(z, batch.t, params.net, 2.0 * basis.project(residual) / batch.size, cache)
    return value, diag_grads, net_grads
