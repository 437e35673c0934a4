from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

from core.errors import InvalidArgumentError
from core.models.data import DataMatrix, RngSpec
from core.models.schedule import OTSchedule, PathSchedule, ScaledMeanSchedule, Time

logger = logging.getLogger("flowlab.paths")

OT = OTSchedule()


def check_time(t: Time, upper: float = 1.0, inclusive: bool = False) -> None:
    t_arr = np.asarray(t, dtype=np.float64)
    too_large = np.any(t_arr > upper) if inclusive else np.any(t_arr >= upper)
    if np.any(t_arr < 0.0) or too_large or not np.all(np.isfinite(t_arr)):
        bound = "]" if inclusive else ")"
        raise InvalidArgumentError(f"time must lie in [0, {upper:g}{bound}", {"t": t_arr.tolist()})


def as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return ``x`` as a d×B matrix plus whether the input was a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim != 2:
        raise InvalidArgumentError("states must be a vector or a d×B matrix")
    return x, False


def time_row(t: Time, batch: int) -> np.ndarray | float:
    """Scalars stay scalars; per-column times are checked against the batch width."""
    if np.ndim(t) == 0:
        return float(t)
    t_arr = np.asarray(t, dtype=np.float64).reshape(-1)
    if t_arr.size != batch:
        raise InvalidArgumentError("need one time per batch column")
    return t_arr


def conditional_velocity(x: np.ndarray, x1: np.ndarray, sched: PathSchedule, t: Time) -> np.ndarray:
    """u_t(x|x₁) = (σ′/σ)(x − μ_t(x₁)) + μ′_t(x₁)."""
    check_time(t)
    x = np.asarray(x, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    ratio = np.asarray(sched.sigma_dt(t)) / np.asarray(sched.sigma(t))
    return ratio * (x - sched.mu(t, x1)) + sched.mu_dt(t, x1)


def squared_distances(X: np.ndarray, t: Time, data: DataMatrix, sched: PathSchedule) -> np.ndarray:
    """‖x_b − μ_t(yⁱ)‖² as an N×B matrix for a d×B batch ``X``."""
    Y = data.points
    if np.ndim(t) == 0:
        means = sched.mu(float(t), Y)
        return cdist(means.T, X.T, "sqeuclidean")
    t_arr = np.asarray(t, dtype=np.float64)
    if isinstance(sched, ScaledMeanSchedule):
        # per-column scale: expand ‖x‖² − 2a·yᵀx + a²‖y‖²
        scale = np.asarray(sched.mean_scale(t_arr))
        cross = Y.T @ X
        sq = (X**2).sum(axis=0)[None, :] - 2.0 * scale[None, :] * cross
        sq += (scale**2)[None, :] * (Y**2).sum(axis=0)[:, None]
        return np.maximum(sq, 0.0)
    return np.stack(
        [cdist(sched.mu(float(tb), Y).T, X[:, [b]].T, "sqeuclidean")[:, 0] for b, tb in enumerate(t_arr)],
        axis=1,
    )


def logits(x: np.ndarray, t: Time, data: DataMatrix, sched: PathSchedule = OT) -> np.ndarray:
    X, single = as_batch(x)
    t = time_row(t, X.shape[1])
    sigma = np.asarray(sched.sigma(t), dtype=np.float64)
    out = -0.5 * squared_distances(X, t, data, sched) / sigma**2
    return out[:, 0] if single else out


def softmax_weights(x: np.ndarray, t: Time, data: DataMatrix, sched: PathSchedule = OT) -> np.ndarray:
    """Posterior weights w_t(x) over the data points: (N,) for a point, N×B for a batch."""
    check_time(t)
    return softmax(logits(x, t, data, sched), axis=0)


def optimal_velocity(x: np.ndarray, t: Time, data: DataMatrix, sched: PathSchedule = OT) -> np.ndarray:
    """v*_t(x) = Σᵢ wᵢ·u_t(x|yⁱ); for the OT path (Y·w − x)/(1−t)."""
    check_time(t)
    X, single = as_batch(x)
    t = time_row(t, X.shape[1])
    w = softmax(logits(X, t, data, sched), axis=0)
    Y = data.points
    if sched.kind == "ot":
        v = (Y @ w - X) / (1.0 - np.asarray(t))
    elif isinstance(sched, ScaledMeanSchedule):
        ratio = np.asarray(sched.sigma_dt(t)) / np.asarray(sched.sigma(t))
        weighted = Y @ w
        v = ratio * (X - sched.mean_scale(t) * weighted) + sched.mean_scale_dt(t) * weighted
    else:
        t_col = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[1],))
        v = np.empty_like(X)
        for b, tb in enumerate(t_col):
            ratio = sched.sigma_dt(tb) / sched.sigma(tb)
            v[:, b] = ratio * (X[:, b] - sched.mu(tb, Y) @ w[:, b]) + sched.mu_dt(tb, Y) @ w[:, b]
    return v[:, 0] if single else v


@dataclass(frozen=True)
class OptimalField:
    """The closed-form optimal velocity field of a discrete target as a VelocityField."""

    data: DataMatrix
    sched: PathSchedule = OT

    def __call__(self, x: np.ndarray, t: Time) -> np.ndarray:
        return optimal_velocity(x, t, self.data, self.sched)

    def weights(self, x: np.ndarray, t: Time) -> np.ndarray:
        return softmax_weights(x, t, self.data, self.sched)


def vp_closed_form_velocity(x: np.ndarray, x1: np.ndarray, t: float, beta0: float) -> np.ndarray:
    """Conditional VP velocity −T′/2·(e^{−T}x − e^{−T/2}x₁)/(1 − e^{−T}) with T = β₀(1−t)."""
    check_time(t)
    T = beta0 * (1.0 - t)
    return -0.5 * beta0 * (np.exp(-T) * x - np.exp(-0.5 * T) * x1) / (-np.expm1(-T))


def marginal_log_density(x: np.ndarray, t: float, data: DataMatrix) -> np.ndarray | float:
    """log p_t(x) for p_t = (1/N)Σᵢ N(t·yⁱ, (1−t)²I)."""
    check_time(t)
    X, single = as_batch(x)
    sigma = 1.0 - t
    log_components = logits(X, t, data, OT)
    normaliser = np.log(data.N) + 0.5 * data.d * np.log(2.0 * np.pi * sigma**2)
    out = logsumexp(log_components, axis=0) - normaliser
    return float(out[0]) if single else out


def marginal_density(x: np.ndarray, t: float, data: DataMatrix) -> np.ndarray | float:
    out = np.exp(marginal_log_density(x, t, data))
    return float(out) if np.ndim(out) == 0 else out


def sample_marginal_with_labels(
    t: float, data: DataMatrix, rng: RngSpec, count: int, substream: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw from the OT marginal; also return the mixture component of each draw."""
    check_time(t)
    if count < 1:
        raise InvalidArgumentError("count must be positive")
    generator = rng.generator(substream)
    labels = generator.integers(0, data.N, size=count)
    noise = generator.standard_normal((data.d, count))
    return t * data.points[:, labels] + (1.0 - t) * noise, labels


def sample_marginal(
    t: float, data: DataMatrix, rng: RngSpec, count: int, substream: int | None = None
) -> np.ndarray:
    return sample_marginal_with_labels(t, data, rng, count, substream)[0]


def data_covariance(data: DataMatrix) -> np.ndarray:
    """Population covariance S_Y of the columns of Y."""
    centred = data.points - data.mean[:, None]
    return centred @ centred.T / data.N


def marginal_moments(t: float, data: DataMatrix) -> tuple[np.ndarray, np.ndarray]:
    check_time(t, inclusive=True)
    mean = t * data.mean
    cov = (1.0 - t) ** 2 * np.eye(data.d) + t**2 * data_covariance(data)
    return mean, cov
