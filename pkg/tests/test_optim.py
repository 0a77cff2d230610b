import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydl.optim import (KINDS, DecaySchedule, NonFiniteGradient, OptimizerState, adagrad_step, adam_step,
                          decayed_eta, momentum_step, rmsprop_step, sgd_step)


def run(state, w0, grad_fn, steps):
    """Drive ``state`` on a one-element parameter; returns the trajectory."""
    p = np.array([w0])
    traj = []
    for _ in range(steps):
        state.step([("w", p, np.array([grad_fn(p[0])]))])
        traj.append(float(p[0]))
    return traj


def test_sgd_examples():
    assert sgd_step([np.array([1.0])], [np.array([0.5])], 0.1)[0][0] == 0.95
    w = np.array([2.0, -1.0])
    assert np.array_equal(sgd_step([w], [np.zeros(2)], 0.1)[0], w)
    with pytest.raises(NonFiniteGradient, match="0"):
        sgd_step([w], [np.array([np.nan, 0.0])], 0.1)


def test_sgd_quadratic_closed_form():
    traj = run(OptimizerState("sgd", eta=0.1), 1.0, lambda w: w, 30)
    # w_t = 0.9 w_{t-1}; the float recursion is exactly the repeated product
    expected, w = [], 1.0
    for _ in range(30):
        w = w - 0.1 * w
        expected.append(w)
    assert traj == expected
    assert all(abs(a - 0.9 ** (t + 1)) < 1e-15 for t, a in enumerate(traj))


def test_momentum_hand_unrolled():
    eta, a = 0.1, 0.9
    traj = run(OptimizerState("momentum", eta=eta, alpha=a), 1.0, lambda w: 0.5, 3)
    w, prev, expected = 1.0, 0.0, []
    for _ in range(3):
        delta = a * prev + (1.0 - a) * (-eta * 0.5)
        w += delta
        prev = delta
        expected.append(w)
    assert traj == expected


def test_momentum_functional_matches_state():
    state = OptimizerState("momentum", eta=0.1, alpha=0.5)
    params = [np.array([1.0, 2.0])]
    for _ in range(3):
        params = momentum_step(state, params, [params[0]])
    ref = run(OptimizerState("momentum", eta=0.1, alpha=0.5), 2.0, lambda w: w, 3)[-1]
    assert params[0][1] == ref


def test_adagrad_first_step_and_rate():
    traj = run(OptimizerState("adagrad", eta=0.1), 0.0, lambda w: 1.0, 1)
    assert traj[0] == pytest.approx(-0.1, abs=1e-9)
    for g in (1.0, 3.0, -2.0):
        state = OptimizerState("adagrad", eta=0.1)
        p, prev, steps = np.array([0.0]), 0.0, []
        for t in range(1, 51):
            state.step([("w", p, np.array([g]))])
            steps.append(abs(p[0] - prev))
            prev = p[0]
            assert abs(steps[-1] - 0.1 / math.sqrt(t)) < 1e-9
        assert all(b < a for a, b in zip(steps, steps[1:]))


def test_adagrad_functional():
    state = OptimizerState("adagrad", eta=0.1)
    out = adagrad_step(state, [np.array([0.0])], [np.array([1.0])])
    assert out[0][0] == pytest.approx(-0.1, abs=1e-9)


def test_rmsprop_hand_unrolled():
    eta, a, gam, eps = 0.01, 0.9, 0.9, 1e-8
    traj = run(OptimizerState("rmsprop", eta=eta, alpha=a, gamma=gam), 1.0, lambda w: w, 5)
    w, acc, prev, expected = 1.0, 0.0, 0.0, []
    for _ in range(5):
        g = w
        acc = acc * gam
        acc = acc + (1.0 - gam) * g * g
        step = -eta * g / (math.sqrt(acc) + eps)
        delta = a * prev + (1.0 - a) * step
        w += delta
        prev = delta
        expected.append(w)
    assert traj == expected


def test_adam_hand_unrolled():
    eta, a, gam, eps = 0.001, 0.9, 0.999, 1e-8
    traj = run(OptimizerState("adam", eta=eta, alpha=a, gamma=gam), 1.0, lambda w: 2.0 * w - 0.3, 3)
    w, m, v, expected = 1.0, 0.0, 0.0, []
    for t in range(1, 4):
        g = 2.0 * w - 0.3
        m = m * a
        m = m + (1.0 - a) * g
        v = v * gam
        v = v + (1.0 - gam) * g * g
        m_hat = m / (1.0 - a ** t)
        v_hat = v / (1.0 - gam ** t)
        w = w - eta * m_hat / (math.sqrt(v_hat) + eps)
        expected.append(w)
    assert traj == expected


def test_adam_time_step_is_per_call():
    state = OptimizerState("adam")
    ps = [np.ones(2), np.ones(3)]
    state.step([("a", ps[0], np.ones(2)), ("b", ps[1], np.ones(3))])
    assert state.step_count == 1
    out = adam_step(OptimizerState("adam"), [np.ones(2)], [np.ones(2)])
    assert np.allclose(out[0], ps[0])  # both saw bias-corrected step t=1


@pytest.mark.parametrize("kind", KINDS)
def test_zero_gradients_leave_fresh_params_unchanged(kind):
    state = OptimizerState(kind)
    w0 = np.array([0.3, -1.2, 5.0])
    p = w0.copy()
    for _ in range(20):
        state.step([("w", p, np.zeros(3))])
    assert np.array_equal(p, w0)


@pytest.mark.parametrize("kind", KINDS)
def test_quadratic_convergence_with_defaults(kind):
    state = OptimizerState(kind)
    rng = np.random.default_rng(3)
    w = rng.normal(size=8)
    w /= np.linalg.norm(w)
    for _ in range(10_000):
        state.step([("w", w, w.copy())])
        if np.linalg.norm(w) < 1e-3:
            break
    assert np.linalg.norm(w) < 1e-3


@pytest.mark.parametrize("kind", ["adagrad", "rmsprop", "adam"])
def test_accumulators_nonnegative_and_shaped(kind, rng):
    state = OptimizerState(kind)
    p = rng.normal(size=(3, 4))
    for _ in range(10):
        state.step([("w", p, rng.normal(size=(3, 4)))])
    acc = state.buffers["g_accum"]["w"]
    assert acc.shape == p.shape and np.all(acc >= 0)


@given(st.floats(1e-3, 1e3), st.floats(0.5, 0.9999), st.integers(1, 30))
@settings(max_examples=60)
def test_adam_alpha0_bound_under_constant_gradient(g, gamma, steps):
    eta = 0.01
    state = OptimizerState("adam", eta=eta, alpha=0.0, gamma=gamma)
    p = np.array([0.0])
    prev = 0.0
    for _ in range(steps):
        state.step([("w", p, np.array([g]))])
        assert abs(p[0] - prev) <= eta * (1 + 1e-6)
        prev = p[0]


def test_adam_alpha0_bound_is_not_universal():
    # quiet steps shrink v_hat's denominator, then a spike overshoots eta by
    # sqrt((1 - gamma^t) / (1 - gamma))
    eta, gamma, t = 0.01, 0.999, 100
    state = OptimizerState("adam", eta=eta, alpha=0.0, gamma=gamma)
    p = np.array([0.0])
    for _ in range(t - 1):
        state.step([("w", p, np.array([0.0]))])
    state.step([("w", p, np.array([1.0]))])
    expected = eta * math.sqrt((1 - gamma ** t) / (1 - gamma))
    assert abs(p[0]) == pytest.approx(expected, rel=1e-6)
    assert abs(p[0]) > eta


def test_nonfinite_gradient_names_parameter():
    with pytest.raises(NonFiniteGradient, match="conv1.weight"):
        OptimizerState("adam").step([("conv1.weight", np.ones(2), np.array([1.0, np.inf]))])


def test_invalid_hyperparameters():
    for kw in (dict(kind="lbfgs"), dict(eta=0), dict(alpha=1.0), dict(gamma=-0.1), dict(epsilon=0)):
        with pytest.raises(ValueError):
            OptimizerState(**{"kind": "adam", **kw})


def test_rmsprop_functional():
    out = rmsprop_step(OptimizerState("rmsprop"), [np.array([1.0])], [np.array([1.0])])
    assert out[0][0] < 1.0


def test_decay_schedule():
    s = DecaySchedule(0.005, 2000)
    assert s.eta(0) == 0.005
    assert abs(decayed_eta(s, 2000) - 0.0018394) < 1e-7
    assert DecaySchedule(0.01).eta(10_000) == 0.01
    with pytest.raises(ValueError):
        DecaySchedule(0.0, 10)
    with pytest.raises(ValueError):
        DecaySchedule(0.1, 0)


@given(st.floats(1e-6, 1.0), st.floats(1.0, 1e5), st.integers(0, 10**6), st.integers(0, 1000))
def test_decay_positive_nonincreasing(eta0, d, k, dk):
    s = DecaySchedule(eta0, d)
    assert s.eta(k) >= s.eta(k + dk) and s.eta(k + dk) >= 0
    assert s.eta(k) > 0 or k / d > 700
