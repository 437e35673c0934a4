from __future__ import annotations

import numpy as np
import pytest

from core.errors import IntegrationError, InvalidArgumentError
from core.models.data import RngSpec
from core.models.trajectory import TIE
from core.services import dynamics_service as dyn
from core.models.schedule import VPSchedule
from core.services.path_service import OT, OptimalField, softmax_weights


def zero_field(x, t):
    return np.zeros_like(x)


def test_uniform_grid_spacing():
    grid = dyn.make_grid("uniform", 100, 1e-4)
    assert grid.steps == 100
    assert np.allclose(np.diff(grid.nodes), (1 - 1e-4) / 100)
    assert grid.terminal == 1 - 1e-4


def test_geometric_grid():
    assert np.array_equal(dyn.make_grid("geometric", 1, 0.5).nodes, [0.0, 0.5])
    gaps = np.diff(dyn.make_grid("geometric", 50, 1e-6).nodes)
    assert gaps[-1] < gaps[0]
    assert np.all(gaps > 0)


def test_grid_rejects_bad_arguments():
    with pytest.raises(InvalidArgumentError):
        dyn.make_grid("uniform", 0, 1e-4)
    with pytest.raises(InvalidArgumentError):
        dyn.make_grid("uniform", 10, 1.0)


def test_single_point_flow_is_linear(single_point):
    grid = dyn.make_grid("uniform", 100, 1e-4)
    x0 = np.array([-1.0, 3.0])
    traj = dyn.integrate_ode(OptimalField(single_point), x0, grid, "rk4")
    t = grid.nodes
    expected = np.outer(x0, 1 - t) + np.outer(single_point.column(0), t)
    assert np.abs(traj.states - expected).max() < 1e-10


def test_midpoint_stays_and_ties(symmetric_pair):
    grid = dyn.make_grid("uniform", 50, 1e-4)
    traj = dyn.generate(OptimalField(symmetric_pair), np.zeros(2), grid, symmetric_pair)
    assert np.all(traj.states == 0.0)
    assert traj.is_tie
    assert traj.endpoint is None


def test_single_point_snaps_exactly(single_point):
    grid = dyn.make_grid("uniform", 20, 1e-4)
    traj = dyn.generate(OptimalField(single_point), np.array([0.5, 0.5]), grid, single_point)
    assert traj.snapped_index == 0
    assert np.array_equal(traj.endpoint, single_point.column(0))


def test_sparse_paths_collapse_and_straighten(sparse_data):
    grid = dyn.make_grid("geometric", 200, 1e-4)
    X0 = np.random.default_rng(5).standard_normal((2, 300))
    field = OptimalField(sparse_data)
    terminal, snapped = dyn.generate_batch(field, X0, grid, sparse_data)
    assert np.count_nonzero(snapped == TIE) == 0
    residuals = dyn.limit_residuals(terminal, sparse_data, 1e-4)
    assert np.mean(residuals < 1e-3) >= 0.99
    angles = dyn.straightening_angles(field, terminal, grid.terminal, sparse_data)
    assert np.median(angles) < 1e-3


def test_limit_residuals_follow_the_schedule(symmetric_pair):
    X = np.array([[0.3, -0.2, 0.9], [0.1, 0.4, -0.5]])
    vp = VPSchedule(beta0=1.0)
    epsilon = 0.3
    residuals = dyn.limit_residuals(X, symmetric_pair, epsilon, vp)

    landing = symmetric_pair.points @ softmax_weights(X, 1.0 - epsilon, symmetric_pair, vp)
    nearest = symmetric_pair.points[:, [0, 1, 0]]
    assert np.allclose(residuals, np.linalg.norm(landing - nearest, axis=0))
    assert not np.allclose(residuals, dyn.limit_residuals(X, symmetric_pair, epsilon, OT))


def test_recorded_states_shape(sparse_data):
    grid = dyn.make_grid("uniform", 10, 1e-3)
    X0 = np.zeros((2, 4))
    states = dyn.integrate_batch_states(OptimalField(sparse_data), X0, grid, "euler", [0, 5, 10])
    assert states.shape == (3, 2, 4)
    assert np.array_equal(states[0], X0)


def test_non_finite_states_raise():
    grid = dyn.make_grid("uniform", 5, 1e-3)
    with pytest.raises(IntegrationError) as excinfo:
        dyn.integrate_batch(lambda x, t: np.full_like(x, np.inf), np.zeros((1, 1)), grid, "euler")
    assert excinfo.value.node_index == 1


def test_zero_noise_sde_equals_euler(sparse_data):
    grid = dyn.make_grid("uniform", 30, 1e-3)
    x0 = np.array([0.2, -0.1])
    field = OptimalField(sparse_data)
    sde = dyn.integrate_sde(field, 0.0, x0, grid, RngSpec(0), 0)
    ode = dyn.integrate_ode(field, x0, grid, "euler")
    assert np.array_equal(sde.states, ode.states)


def test_brownian_endpoint_variance():
    grid = dyn.make_grid("uniform", 10, 1e-4)
    X = dyn.integrate_sde_batch(zero_field, 1.0, np.zeros((1, 20_000)), grid, RngSpec(4), 0)
    assert X.var() == pytest.approx(1 - 1e-4, abs=0.05)


def test_flow_jacobian_of_zero_field_is_identity():
    J = dyn.flow_jacobian_fd(zero_field, np.array([0.4, -1.0, 2.0]), 0.0, 0.5, steps=10)
    assert np.allclose(J, np.eye(3), atol=1e-9)


def test_flow_jacobian_single_point(single_point):
    J = dyn.flow_jacobian_fd(OptimalField(single_point), np.array([1.0, 1.0]), 0.0, 0.5, steps=50)
    assert np.allclose(J, 0.5 * np.eye(2), atol=1e-6)


def test_lipschitz_of_linear_field():
    A = np.array([[1.0, 2.0], [-0.5, 0.3]])
    grid = dyn.make_grid("uniform", 4, 1e-2)
    samples = np.random.default_rng(0).standard_normal((2, 5))
    L = dyn.lipschitz_estimate(lambda x, t: A @ x, samples, grid)
    assert L == pytest.approx(np.linalg.norm(A, 2), abs=1e-4)


def test_lipschitz_of_constant_field():
    grid = dyn.make_grid("uniform", 4, 1e-2)
    samples = np.random.default_rng(0).standard_normal((2, 3))
    assert dyn.lipschitz_estimate(lambda x, t: np.ones_like(x), samples, grid) < 1e-6


def test_lipschitz_single_point_grows_like_inverse_epsilon(single_point):
    grid = dyn.make_grid("uniform", 10, 1e-2)
    samples = np.random.default_rng(0).standard_normal((2, 3))
    assert dyn.lipschitz_estimate(OptimalField(single_point), samples, grid) == pytest.approx(100.0, rel=1e-5)


def test_hessian_bound_limits():
    assert dyn.hessian_bound(0.0, 3.0, 0.5) == 1.5
    assert dyn.hessian_bound(1.0, 1.0, 1.0) == pytest.approx(np.e**2 - np.e)


def test_flow_hessian_of_linear_flow_vanishes(single_point):
    H = dyn.flow_hessian_fd(OptimalField(single_point), np.array([0.3, 0.1]), 0.0, 0.5, steps=20)
    assert np.abs(H).max() < 1e-4


def test_noise_scaling_fit():
    sigmas = np.array([0.01, 0.02, 0.04])
    c2, c3, r2 = dyn.fit_noise_scaling(sigmas, 3.0 * sigmas**2)
    assert c2 == pytest.approx(3.0)
    assert c3 == pytest.approx(0.0, abs=1e-6)
    assert r2 == pytest.approx(1.0)


def test_trajectory_csv(single_point):
    grid = dyn.make_grid("uniform", 2, 0.5)
    text = dyn.trajectory_csv(dyn.integrate_ode(OptimalField(single_point), np.zeros(2), grid))
    lines = text.splitlines()
    assert lines[0] == "t,x0,x1"
    assert len(lines) == 4
