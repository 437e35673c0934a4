from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from core.errors import InvalidArgumentError, NonFiniteGradientError
from core.models.network import Params


@dataclass
class AdamWState:
    step: int = 0
    first_moment: Params = field(default_factory=dict)
    second_moment: Params = field(default_factory=dict)


def _check_grads(params: Params, grads: Params) -> None:
    if set(params) != set(grads):
        raise InvalidArgumentError("gradients do not match the parameters")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise InvalidArgumentError(f"gradient {name} has the wrong shape")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}", {"parameter": name})


def global_norm(grads: Params) -> float:
    return math.sqrt(sum(float((g**2).sum()) for g in grads.values()))


def clip_grad_norm(grads: Params, max_norm: float | None) -> tuple[Params, float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = next((name for name, g in grads.items() if not np.all(np.isfinite(g))), "global norm")
        raise NonFiniteGradientError(f"non-finite gradient for {bad}", {"parameter": bad})
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """p ← p − lr·g."""
    _check_grads(params, grads)
    return {name: value - lr * grads[name] for name, value in params.items()}


def adamw_step(
    params: Params,
    grads: Params,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> tuple[Params, AdamWState]:
    """Decoupled weight decay followed by the bias-corrected Adam update."""
    _check_grads(params, grads)
    beta1, beta2 = betas
    step = state.step + 1
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    new_params: Params = {}
    first: Params = {}
    second: Params = {}
    for name, value in params.items():
        grad = grads[name]
        m = beta1 * state.first_moment.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.second_moment.get(name, np.zeros_like(value)) + (1.0 - beta2) * grad**2
        decayed = value * (1.0 - lr * weight_decay)
        new_params[name] = decayed - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        first[name] = m
        second[name] = v
    return new_params, AdamWState(step=step, first_moment=first, second_moment=second)
