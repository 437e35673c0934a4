from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from core.errors import InvalidArgumentError
from core.models.data import RngSpec
from core.models.network import Params, SubspaceNet
from core.models.schedule import Time
from core.schemas.osdnet import Activation, EmbeddingConfig, NetConfig

logger = logging.getLogger("flowlab.network")


def emb(t: Time, cfg: EmbeddingConfig) -> np.ndarray:
    """Sinusoidal embedding; entry 2k = sin(s·t/ℓ^{2k/dim}), entry 2k+1 = cos(same).

    A scalar ``t`` gives a (dim,) vector, an array of B times a dim×B matrix.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    frequencies = cfg.scale / cfg.wavelength ** (np.arange(0, cfg.dim, 2) / cfg.dim)
    phase = frequencies[:, None] * t_arr.reshape(1, -1)
    out = np.empty((cfg.dim, phase.shape[1]))
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out[:, 0] if t_arr.ndim == 0 else out


def _activate(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == "silu":
        return a * expit(a)
    if kind == "tanh":
        return np.tanh(a)
    return np.logaddexp(0.0, a)


def _activate_grad(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == "silu":
        sig = expit(a)
        return sig * (1.0 + a * (1.0 - sig))
    if kind == "tanh":
        return 1.0 - np.tanh(a) ** 2
    return expit(a)


def init_net(D: int, config: NetConfig, rng: RngSpec, substream: int | None = None) -> SubspaceNet:
    """Weights uniform with variance 2/fan_in, biases zero."""
    generator = rng.generator(substream)
    params: Params = {}
    for name, shape in SubspaceNet.shapes(D, config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / shape[1])
            params[name] = generator.uniform(-bound, bound, size=shape)
    return SubspaceNet(params=params, D=D, config=config)


def zeros_like(net: SubspaceNet) -> Params:
    return {name: np.zeros_like(value) for name, value in net.params.items()}


@dataclass
class ForwardCache:
    inputs: np.ndarray
    hidden: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)


def _as_columns(x_sub: np.ndarray, D: int) -> tuple[np.ndarray, bool]:
    x_sub = np.asarray(x_sub, dtype=np.float64)
    single = x_sub.ndim == 1
    X = x_sub[:, None] if single else x_sub
    if X.shape[0] != D:
        raise InvalidArgumentError(f"network expects {D} subspace coordinates, got {X.shape[0]}")
    return X, single


def net_forward_cached(x_sub: np.ndarray, t: Time, net: SubspaceNet) -> tuple[np.ndarray, ForwardCache]:
    X, single = _as_columns(x_sub, net.D)
    E = emb(t, net.embedding)
    E = np.broadcast_to(E[:, None], (E.shape[0], X.shape[1])) if E.ndim == 1 else E
    if E.shape[1] != X.shape[1]:
        raise InvalidArgumentError("need one time per batch column")
    p = net.params
    inputs = np.concatenate([X, E], axis=0)
    h = p["input.weight"] @ inputs + p["input.bias"][:, None]
    cache = ForwardCache(inputs=inputs, hidden=[h])
    for i in range(net.config.blocks):
        a = p[f"blocks.{i}.fc1.weight"] @ h + p[f"blocks.{i}.fc1.bias"][:, None]
        z = _activate(net.config.activation, a)
        h = h + p[f"blocks.{i}.fc2.weight"] @ z + p[f"blocks.{i}.fc2.bias"][:, None]
        cache.pre_activations.append(a)
        cache.activations.append(z)
        cache.hidden.append(h)
    out = p["output.weight"] @ h + p["output.bias"][:, None]
    return (out[:, 0] if single else out), cache


def net_forward(x_sub: np.ndarray, t: Time, net: SubspaceNet) -> np.ndarray:
    """ŝ_t on subspace coordinates: a (D,) vector or a D×B batch."""
    return net_forward_cached(x_sub, t, net)[0]


def net_backward(
    x_sub: np.ndarray,
    t: Time,
    net: SubspaceNet,
    upstream: np.ndarray,
    cache: ForwardCache | None = None,
) -> tuple[Params, np.ndarray]:
    """Gradients of ⟨upstream, net_forward(x_sub, t)⟩ for every parameter (summed over
    the batch) and with respect to ``x_sub``."""
    if cache is None:
        cache = net_forward_cached(x_sub, t, net)[1]
    G = np.asarray(upstream, dtype=np.float64)
    single = G.ndim == 1
    G = G[:, None] if single else G
    p = net.params
    grads: Params = {}

    h = cache.hidden[-1]
    grads["output.weight"] = G @ h.T
    grads["output.bias"] = G.sum(axis=1)
    g = p["output.weight"].T @ G
    for i in reversed(range(net.config.blocks)):
        z = cache.activations[i]
        grads[f"blocks.{i}.fc2.weight"] = g @ z.T
        grads[f"blocks.{i}.fc2.bias"] = g.sum(axis=1)
        g_a = (p[f"blocks.{i}.fc2.weight"].T @ g) * _activate_grad(
            net.config.activation, cache.pre_activations[i]
        )
        grads[f"blocks.{i}.fc1.weight"] = g_a @ cache.hidden[i].T
        grads[f"blocks.{i}.fc1.bias"] = g_a.sum(axis=1)
        g = g + p[f"blocks.{i}.fc1.weight"].T @ g_a
    grads["input.weight"] = g @ cache.inputs.T
    grads["input.bias"] = g.sum(axis=1)
    grad_x = (p["input.weight"].T @ g)[: net.D]
    return grads, (grad_x[:, 0] if single else grad_x)


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([params[name].ravel() for name in sorted(params)])


def unflatten(vector: np.ndarray, like: Params) -> Params:
    out: Params = {}
    offset = 0
    for name in sorted(like):
        size = like[name].size
        out[name] = vector[offset : offset + size].reshape(like[name].shape)
        offset += size
    return out
