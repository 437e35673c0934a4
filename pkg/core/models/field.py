from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from core.models.schedule import Time


@runtime_checkable
class VelocityField(Protocol):
    """v(x, t) → ℝᵈ.

    ``x`` is a point (d,) or a batch (d, B); ``t`` is a scalar or one time per
    batch column. The result has the shape of ``x``.
    """

    def __call__(self, x: np.ndarray, t: Time) -> np.ndarray: ...
