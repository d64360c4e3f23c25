"""Tests for the Adam step and the learning-rate schedule."""

import numpy as np
import pytest

from svtnet.config import TrainConfig
from svtnet.training.optim import NonFiniteGradientError, OptimState, adam_step, learning_rate


def test_first_step_moves_by_learning_rate():
    params = {"theta": np.zeros(1)}
    adam_step(params, {"theta": np.ones(1)}, OptimState.for_params(params), lr=1e-3)
    assert params["theta"][0] == pytest.approx(-1e-3, rel=1e-6)


def test_zero_gradient_leaves_parameters_unchanged(rng):
    params = {"w": rng.normal(size=(3, 2))}
    before = params["w"].copy()
    state = OptimState.for_params(params)
    adam_step(params, {"w": np.zeros((3, 2))}, state, lr=1e-3)
    assert np.array_equal(params["w"], before)
    assert state.step == 1


def test_moments_decay_under_zero_gradient():
    params = {"w": np.zeros(2)}
    state = OptimState.for_params(params)
    adam_step(params, {"w": np.ones(2)}, state, lr=1e-3)
    first, second = state.first["w"].copy(), state.second["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, lr=1e-3)
    np.testing.assert_allclose(state.first["w"], 0.9 * first)
    np.testing.assert_allclose(state.second["w"], 0.999 * second)


def test_non_finite_gradient_names_parameter():
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    state = OptimState.for_params(params)
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state, lr=1e-3)
    assert np.array_equal(params["a"], np.zeros(2))
    assert state.step == 0


def test_shape_mismatch():
    params = {"a": np.zeros(2)}
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"a": np.zeros(3)}, OptimState.for_params(params), lr=1e-3)


@pytest.mark.parametrize(
    "profile,epoch,expected",
    [
        ("baseline", 0, 1e-3),
        ("baseline", 29, 1e-3),
        ("baseline", 30, 1e-4),
        ("baseline", 39, 1e-4),
        ("refined", 59, 1e-3),
        ("refined", 60, 1e-4),
    ],
)
def test_learning_rate_schedule(profile, epoch, expected):
    assert learning_rate(TrainConfig.for_profile(profile), epoch) == pytest.approx(expected)
