import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperedit.diffusion import (LatentState, NoiseSchedule, ddim_step, forward_sample, implied_x0,
                                 make_linear_schedule)


def test_linear_schedule_endpoints():
    s = make_linear_schedule(10)
    assert s.T == 10
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[10] == pytest.approx(1 / 11, abs=1e-15)
    assert math.isclose(s.alpha_bar[10], 0.090909, abs_tol=1e-6)


@pytest.mark.parametrize("T", [0, -3, 2.5])
def test_linear_schedule_rejects_bad_T(T):
    with pytest.raises(ValueError):
        make_linear_schedule(T)


@given(st.integers(1, 500))
def test_schedule_strictly_decreasing_and_positive(T):
    ab = make_linear_schedule(T).alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] > 0


@pytest.mark.parametrize("bad", [[0.9, 0.5], [1.0, 1.0], [1.0, 0.5, 0.0], [1.0]])
def test_schedule_invariants_enforced(bad):
    with pytest.raises(ValueError):
        NoiseSchedule(np.array(bad))


def test_forward_sample_examples():
    s = make_linear_schedule(10)
    x0 = np.array([0.3, -1.2])
    assert np.array_equal(forward_sample(x0, 0, np.array([5.0, -7.0]), s), x0)
    np.testing.assert_allclose(forward_sample(x0, 4, np.zeros(2), s), np.sqrt(s.alpha_bar[4]) * x0)
    got = forward_sample(np.array([1.0]), 10, np.array([1.0]), s)
    assert got[0] == pytest.approx(math.sqrt(1 / 11) + math.sqrt(10 / 11), abs=1e-12)
    assert got[0] == pytest.approx(1.254974, abs=1e-6)


def test_forward_sample_dimension_mismatch():
    s = make_linear_schedule(5)
    with pytest.raises(ValueError):
        forward_sample(np.zeros(3), 1, np.zeros(2), s)
    with pytest.raises(ValueError):
        forward_sample(np.zeros(3), 6, np.zeros(3), s)


def test_implied_x0_examples():
    s = make_linear_schedule(10)
    x = np.array([0.5, 2.0])
    np.testing.assert_allclose(implied_x0(x, 3, np.zeros(2), s), x / np.sqrt(s.alpha_bar[3]))
    eps = np.array([0.7, -0.1])
    xt = np.sqrt(1 - s.alpha_bar[6]) * eps
    np.testing.assert_allclose(implied_x0(xt, 6, eps, s), np.zeros(2), atol=1e-15)
    with pytest.raises(ValueError):
        implied_x0(x, 0, eps, s)


def test_ddim_step_examples():
    s = make_linear_schedule(10)
    xh = np.array([0.25, -3.0])
    eps = np.array([1.0, 2.0])
    assert np.array_equal(ddim_step(xh, 1, eps, s), xh)
    np.testing.assert_allclose(ddim_step(xh, 7, np.zeros(2), s), np.sqrt(s.alpha_bar[6]) * xh)
    with pytest.raises(ValueError):
        ddim_step(xh, 0, eps, s)


def test_ddim_chain_reproduces_forward_trajectory():
    rng = np.random.default_rng(3)
    s = make_linear_schedule(12)
    x0, eps = rng.standard_normal(5), rng.standard_normal(5)
    x = forward_sample(x0, s.T, eps, s)
    for t in range(s.T, 0, -1):
        x = ddim_step(implied_x0(x, t, eps, s), t, eps, s)
        np.testing.assert_allclose(x, forward_sample(x0, t - 1, eps, s), atol=1e-12)


@settings(max_examples=200)
@given(st.integers(1, 60), st.data())
def test_round_trip_property(T, data):
    s = make_linear_schedule(T)
    t = data.draw(st.integers(1, T))
    seed = data.draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal(8) * 3, rng.standard_normal(8)
    back = implied_x0(forward_sample(x0, t, eps, s), t, eps, s)
    assert np.max(np.abs(back - x0)) <= 1e-9


@given(st.integers(0, 10), st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_forward_sample_is_linear(t, seed, a, b):
    s = make_linear_schedule(10)
    rng = np.random.default_rng(seed)
    x1, x2, e1, e2 = rng.standard_normal((4, 6))
    lhs = forward_sample(a * x1 + b * x2, t, a * e1 + b * e2, s)
    rhs = a * forward_sample(x1, t, e1, s) + b * forward_sample(x2, t, e2, s)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_latent_state_validation():
    with pytest.raises(ValueError):
        LatentState(np.array([1.0, np.nan]), 3)
    with pytest.raises(ValueError):
        LatentState(np.zeros(2), -1)
