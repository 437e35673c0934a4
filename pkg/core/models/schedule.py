from __future__ import annotations

from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

ScheduleKind = Literal["ot", "vp", "custom"]

# A scalar time, or one time per batch column.
Time = Union[float, np.ndarray]


class PathSchedule(ABC):
    """Gaussian conditional path p_t(x|x₁) = N(μ_t(x₁), σ_t² I).

    ``x1`` may be a single point (d,) or a matrix of points (d, N); the mean
    maps act column-wise.
    """

    kind: ScheduleKind

    @abstractmethod
    def mu(self, t: Time, x1: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def mu_dt(self, t: Time, x1: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def sigma(self, t: Time) -> Time: ...

    @abstractmethod
    def sigma_dt(self, t: Time) -> Time: ...


class ScaledMeanSchedule(PathSchedule):
    """Schedules with μ_t(x₁) = a(t)·x₁; every method broadcasts over array ``t``."""

    @abstractmethod
    def mean_scale(self, t: Time) -> Time: ...

    @abstractmethod
    def mean_scale_dt(self, t: Time) -> Time: ...

    def mu(self, t: Time, x1: np.ndarray) -> np.ndarray:
        return self.mean_scale(t) * np.asarray(x1, dtype=np.float64)

    def mu_dt(self, t: Time, x1: np.ndarray) -> np.ndarray:
        return self.mean_scale_dt(t) * np.asarray(x1, dtype=np.float64)


@dataclass(frozen=True)
class OTSchedule(ScaledMeanSchedule):
    kind: ScheduleKind = "ot"

    def mean_scale(self, t: Time) -> Time:
        return t

    def mean_scale_dt(self, t: Time) -> Time:
        return np.ones_like(t, dtype=np.float64) if np.ndim(t) else 1.0

    def sigma(self, t: Time) -> Time:
        return 1.0 - t

    def sigma_dt(self, t: Time) -> Time:
        return -np.ones_like(t, dtype=np.float64) if np.ndim(t) else -1.0


@dataclass(frozen=True)
class VPSchedule(ScaledMeanSchedule):
    """Variance-preserving path with constant noise scale β(s) = beta0.

    μ_t(x₁) = α_{1−t}·x₁, σ_t² = 1 − α²_{1−t}, α_s = exp(−T(s)/2), T(s) = beta0·s.
    """

    beta0: float = 1.0
    kind: ScheduleKind = "vp"

    def alpha(self, s: Time) -> Time:
        return np.exp(-0.5 * self.beta0 * np.asarray(s, dtype=np.float64))

    def mean_scale(self, t: Time) -> Time:
        return self.alpha(1.0 - np.asarray(t, dtype=np.float64))

    def mean_scale_dt(self, t: Time) -> Time:
        return 0.5 * self.beta0 * self.mean_scale(t)

    def sigma(self, t: Time) -> Time:
        return np.sqrt(-np.expm1(-self.beta0 * (1.0 - np.asarray(t, dtype=np.float64))))

    def sigma_dt(self, t: Time) -> Time:
        return -self.mean_scale(t) * self.mean_scale_dt(t) / self.sigma(t)


@dataclass(frozen=True)
class CustomSchedule(PathSchedule):
    """User-supplied path; ``mu_fn``/``mu_dt_fn`` must broadcast over a (d, N)
    matrix and are only ever called with a scalar time."""

    mu_fn: Callable[[float, np.ndarray], np.ndarray]
    mu_dt_fn: Callable[[float, np.ndarray], np.ndarray]
    sigma_fn: Callable[[float], float]
    sigma_dt_fn: Callable[[float], float]
    kind: ScheduleKind = "custom"

    def mu(self, t: Time, x1: np.ndarray) -> np.ndarray:
        return np.asarray(self.mu_fn(float(t), x1), dtype=np.float64)

    def mu_dt(self, t: Time, x1: np.ndarray) -> np.ndarray:
        return np.asarray(self.mu_dt_fn(float(t), x1), dtype=np.float64)

    def sigma(self, t: Time) -> Time:
        return float(self.sigma_fn(float(t)))

    def sigma_dt(self, t: Time) -> Time:
        return float(self.sigma_dt_fn(float(t)))
