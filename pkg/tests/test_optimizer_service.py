from __future__ import annotations

import numpy as np
import pytest

from core.errors import InvalidArgumentError, NonFiniteGradientError
from core.services.optimizer_service import AdamWState, adamw_step, clip_grad_norm, global_norm, sgd_step


def test_sgd_contracts_quadratic():
    params = {"p": np.array([1.0, -2.0])}
    for step in range(1, 6):
        params = sgd_step(params, {"p": params["p"]}, 0.1)
        assert np.allclose(params["p"], np.array([1.0, -2.0]) * 0.9**step)


def test_adamw_zero_gradient_without_decay_is_a_no_op():
    params = {"w": np.array([[0.5, -1.0]])}
    new, state = adamw_step(params, {"w": np.zeros((1, 2))}, AdamWState(), 1e-2, weight_decay=0.0)
    assert np.array_equal(new["w"], params["w"])
    assert state.step == 1


def test_adamw_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, 1.0, 1.0])}
    grads = {"w": np.array([3.0, -0.2, 50.0])}
    new, _ = adamw_step(params, grads, AdamWState(), 1e-3, weight_decay=0.0)
    assert np.allclose(params["w"] - new["w"], 1e-3 * np.sign(grads["w"]), rtol=1e-2)


def test_adamw_decoupled_decay():
    params = {"w": np.array([2.0])}
    new, _ = adamw_step(params, {"w": np.zeros(1)}, AdamWState(), 0.1, weight_decay=0.5)
    assert new["w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_state_accumulates():
    params = {"w": np.array([1.0])}
    state = AdamWState()
    for _ in range(3):
        params, state = adamw_step(params, {"w": np.array([1.0])}, state, 1e-2)
    assert state.step == 3
    assert state.first_moment["w"][0] == pytest.approx(1 - 0.9**3)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    same, _ = clip_grad_norm(grads, None)
    assert same is grads


def test_non_finite_gradient_is_named():
    with pytest.raises(NonFiniteGradientError) as excinfo:
        clip_grad_norm({"a": np.array([1.0]), "b": np.array([np.nan])}, 1.0)
    assert excinfo.value.details == {"parameter": "b"}


def test_mismatched_gradients_rejected():
    with pytest.raises(InvalidArgumentError):
        sgd_step({"a": np.zeros(2)}, {"b": np.zeros(2)}, 0.1)
    with pytest.raises(InvalidArgumentError):
        sgd_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, 0.1)
