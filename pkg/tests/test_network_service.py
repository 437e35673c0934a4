from __future__ import annotations

import numpy as np
import pytest

from core.errors import InvalidArgumentError
from core.models.data import RngSpec
from core.models.network import SubspaceNet
from core.schemas.osdnet import EmbeddingConfig, NetConfig
from core.services import network_service as nn


def test_embedding_at_zero():
    cfg = EmbeddingConfig(scale=1000.0, wavelength=10000.0, dim=8)
    assert np.array_equal(nn.emb(0.0, cfg), [0, 1, 0, 1, 0, 1, 0, 1])


def test_embedding_first_entry():
    cfg = EmbeddingConfig(scale=1000.0, wavelength=10000.0, dim=256)
    t = np.array([0.0, 0.3, 0.77])
    E = nn.emb(t, cfg)
    assert E.shape == (256, 3)
    assert np.allclose(E[0], np.sin(1000.0 * t))
    assert np.allclose(E[:, 1], nn.emb(0.3, cfg))


def test_odd_embedding_dim_rejected():
    with pytest.raises(ValueError):
        EmbeddingConfig(dim=7)


def test_zero_weights_give_zero_output(small_net):
    net = nn.init_net(3, small_net, RngSpec(0))
    zero = net.with_params(nn.zeros_like(net))
    assert np.array_equal(nn.net_forward(np.ones((3, 4)), 0.5, zero), np.zeros((3, 4)))


def test_zeroed_blocks_are_identity(small_embedding):
    with_block = nn.init_net(3, NetConfig(hidden=8, blocks=1, embedding=small_embedding), RngSpec(0))
    params = dict(with_block.params)
    for name in params:
        if name.startswith("blocks."):
            params[name] = np.zeros_like(params[name])
    plain = SubspaceNet(
        {k: v for k, v in params.items() if not k.startswith("blocks.")},
        3,
        NetConfig(hidden=8, blocks=0, embedding=small_embedding),
    )
    x = np.random.default_rng(1).standard_normal((3, 5))
    t = np.linspace(0.0, 0.9, 5)
    assert np.allclose(nn.net_forward(x, t, with_block.with_params(params)), nn.net_forward(x, t, plain))


def test_initialisation(small_net):
    net = nn.init_net(3, small_net, RngSpec(0), substream=2)
    assert np.all(net.params["input.bias"] == 0.0)
    fan_in = 3 + small_net.embedding.dim
    assert np.abs(net.params["input.weight"]).max() <= np.sqrt(6.0 / fan_in)
    again = nn.init_net(3, small_net, RngSpec(0), substream=2)
    assert all(np.array_equal(net.params[k], again.params[k]) for k in net.params)


def test_layout_mismatch_rejected(small_net):
    net = nn.init_net(3, small_net, RngSpec(0))
    params = dict(net.params)
    params["output.bias"] = np.zeros(4)
    with pytest.raises(InvalidArgumentError):
        net.with_params(params)
    with pytest.raises(InvalidArgumentError):
        nn.net_forward(np.ones(4), 0.1, net)


def test_zero_upstream_gives_zero_gradients(small_net):
    net = nn.init_net(3, small_net, RngSpec(0))
    x = np.ones((3, 2))
    grads, grad_x = nn.net_backward(x, 0.2, net, np.zeros((3, 2)))
    assert all(np.count_nonzero(g) == 0 for g in grads.values())
    assert np.count_nonzero(grad_x) == 0


def test_output_layer_gradient_is_outer_product(small_embedding):
    net = nn.init_net(2, NetConfig(hidden=5, blocks=0, embedding=small_embedding), RngSpec(0))
    x = np.array([0.3, -0.7])
    upstream = np.array([1.5, -2.0])
    _, cache = nn.net_forward_cached(x, 0.4, net)
    grads, _ = nn.net_backward(x, 0.4, net, upstream, cache)
    assert np.allclose(grads["output.weight"], np.outer(upstream, cache.hidden[-1][:, 0]))
    assert np.allclose(grads["output.bias"], upstream)


@pytest.mark.parametrize("activation", ["silu", "tanh", "softplus"])
def test_backward_matches_finite_differences(small_embedding, activation):
    config = NetConfig(hidden=8, blocks=2, activation=activation, embedding=small_embedding)
    net = nn.init_net(3, config, RngSpec(0))
    generator = np.random.default_rng(2)
    x = generator.standard_normal((3, 5))
    t = generator.uniform(0.0, 1.0, 5)
    upstream = generator.standard_normal((3, 5))

    def objective(vector: np.ndarray) -> float:
        candidate = net.with_params(nn.unflatten(vector, net.params))
        return float((upstream * nn.net_forward(x, t, candidate)).sum())

    grads, _ = nn.net_backward(x, t, net, upstream)
    flat_grad = nn.flatten(grads)
    theta = nn.flatten(net.params)
    h = 1e-5
    for index in generator.choice(theta.size, size=50, replace=False):
        step = np.zeros_like(theta)
        step[index] = h
        fd = (objective(theta + step) - objective(theta - step)) / (2 * h)
        assert abs(fd - flat_grad[index]) <= 1e-4 * max(1.0, abs(flat_grad[index]))


def test_input_gradient_matches_finite_differences(small_net):
    net = nn.init_net(3, small_net, RngSpec(4))
    x = np.array([0.2, -0.4, 1.1])
    upstream = np.array([0.5, 1.0, -1.0])
    _, grad_x = nn.net_backward(x, 0.3, net, upstream)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = upstream @ (nn.net_forward(x + e, 0.3, net) - nn.net_forward(x - e, 0.3, net)) / (2 * h)
        assert fd == pytest.approx(grad_x[i], abs=1e-6)
