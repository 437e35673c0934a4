from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import InvalidArgumentError
from core.models.data import DataMatrix, RngSpec
from core.models.schedule import OTSchedule, VPSchedule
from core.services import path_service

OT = OTSchedule()


def test_conditional_velocity_ot():
    u = path_service.conditional_velocity(np.zeros(2), np.array([2.0, 0.0]), OT, 0.0)
    assert np.allclose(u, [2.0, 0.0])


def test_conditional_velocity_along_path_is_displacement():
    x0, x1, t = np.array([1.0, 1.0]), np.array([3.0, 3.0]), 0.5
    x = (1 - t) * x0 + t * x1
    assert np.allclose(path_service.conditional_velocity(x, x1, OT, t), [2.0, 2.0])


def test_vp_velocity_matches_closed_form():
    sched = VPSchedule(beta0=1.0)
    x, x1 = np.array([0.3, -1.2]), np.array([2.0, 0.5])
    expected = path_service.vp_closed_form_velocity(x, x1, 0.5, 1.0)
    assert np.allclose(path_service.conditional_velocity(x, x1, sched, 0.5), expected, atol=1e-12)


def test_weights_uniform_at_time_zero(sparse_data):
    w = path_service.softmax_weights(np.array([3.0, -7.0]), 0.0, sparse_data)
    assert np.allclose(w, 1.0 / 6.0)


def test_weights_symmetric_point(symmetric_pair):
    w = path_service.softmax_weights(np.array([0.0, 5.0]), 0.4, symmetric_pair)
    assert np.allclose(w, [0.5, 0.5])


def test_weights_saturate_near_a_point():
    data = DataMatrix(np.array([[10.0, -10.0], [0.0, 0.0]]))
    w = path_service.softmax_weights(np.array([9.0, 0.0]), 0.9, data)
    assert w[0] > 1.0 - 1e-12


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-20, 20), min_size=2, max_size=2),
    st.floats(0.0, 0.99),
    st.permutations(range(6)),
)
def test_weights_sum_to_one_and_follow_permutations(x, t, order):
    data = DataMatrix(np.arange(12, dtype=float).reshape(2, 6) - 5.0)
    permuted = DataMatrix(data.points[:, list(order)])
    w = path_service.softmax_weights(np.array(x), t, data)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.allclose(path_service.softmax_weights(np.array(x), t, permuted), w[list(order)], atol=1e-12)


def test_optimal_velocity_single_point(single_point):
    v = path_service.optimal_velocity(np.zeros(2), 0.0, single_point)
    assert np.allclose(v, [2.0, 0.0])


def test_optimal_velocity_symmetric_pair_is_stationary(symmetric_pair):
    for t in (0.0, 0.5, 0.99):
        assert np.allclose(path_service.optimal_velocity(np.zeros(2), t, symmetric_pair), 0.0)


def test_optimal_velocity_at_time_zero_points_to_mean(sparse_data):
    x = np.array([1.5, -0.5])
    assert np.allclose(path_service.optimal_velocity(x, 0.0, sparse_data), sparse_data.mean - x)


def test_optimal_velocity_batch_matches_columns(sparse_data):
    X = np.random.default_rng(0).standard_normal((2, 5))
    t = np.linspace(0.1, 0.9, 5)
    batch = path_service.optimal_velocity(X, t, sparse_data)
    for b in range(5):
        assert np.allclose(batch[:, b], path_service.optimal_velocity(X[:, b], t[b], sparse_data))


def test_general_route_matches_ot_shortcut(sparse_data):
    x = np.array([0.7, 2.0])
    direct = sum(
        w * path_service.conditional_velocity(x, sparse_data.column(i), OT, 0.6)
        for i, w in enumerate(path_service.softmax_weights(x, 0.6, sparse_data))
    )
    assert np.allclose(path_service.optimal_velocity(x, 0.6, sparse_data), direct, atol=1e-12)


def test_time_one_is_rejected(sparse_data):
    with pytest.raises(InvalidArgumentError):
        path_service.optimal_velocity(np.zeros(2), 1.0, sparse_data)


def test_marginal_density_two_points():
    data = DataMatrix(np.array([[-1.0, 1.0]]))
    assert path_service.marginal_density(np.array([0.0]), 0.5, data) == pytest.approx(0.48394, abs=1e-5)


def test_marginal_density_time_zero_is_standard_normal(sparse_data):
    x = np.array([0.3, -0.4])
    expected = np.exp(-0.5 * x @ x) / (2 * np.pi)
    assert path_service.marginal_density(x, 0.0, sparse_data) == pytest.approx(expected, rel=1e-12)


def test_marginal_sampling_single_point():
    data = DataMatrix(np.array([[2.0], [-4.0]]))
    X = path_service.sample_marginal(0.5, data, RngSpec(1), 100_000)
    assert np.allclose(X.mean(axis=1), [1.0, -2.0], atol=0.01)


def test_marginal_sampling_near_one_clusters(sparse_data):
    X, labels = path_service.sample_marginal_with_labels(0.999, sparse_data, RngSpec(2), 2_000)
    distances = np.linalg.norm(X - 0.999 * sparse_data.points[:, labels], axis=0)
    assert distances.max() < 0.01 * np.sqrt(2) * 4


def test_marginal_moments():
    data = DataMatrix(np.array([[-1.0, 1.0]]))
    mean, cov = path_service.marginal_moments(0.5, data)
    assert mean == pytest.approx([0.0])
    assert cov[0, 0] == pytest.approx(0.5)
    mean, cov = path_service.marginal_moments(0.0, data)
    assert np.allclose(cov, np.eye(1))
    mean, cov = path_service.marginal_moments(1.0, data)
    assert cov[0, 0] == pytest.approx(1.0)
