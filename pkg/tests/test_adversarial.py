import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_err, sample_coords
from tinydl.adversarial import (AttackConfig, ZeroGradientError, attack_loss, input_gradient, perturb,
                                robustness_report, write_report)
from tinydl.config import parse_config
from tinydl.data import Dataset, one_hot
from tinydl.model import build

NET = """
input 8 8 1
conv filters=3 kernel=3 act=tanh
flatten
dense units=6 act=tanh
dense units=4 act=softmax
[train]
init=normal stddev=0.5 bias=0.1
"""


@pytest.fixture(scope="module")
def model():
    return build(parse_config(NET)).eval()


def test_input_gradient_matches_fd(model):
    rng = np.random.default_rng(2)
    x = rng.random((3, 8, 8, 1))
    y = one_hot(np.array([0, 3, 1]), 4)
    g = input_gradient(model, x, y)
    coords = sample_coords(x.shape, rng, 150)
    num = numeric_grad(lambda: attack_loss(model, x, y), x, coords)
    assert rel_err(g.ravel()[coords], num).max() < 1e-4


def test_targeted_gradient_descends_target_loss(model):
    rng = np.random.default_rng(3)
    x = rng.random((2, 8, 8, 1))
    target = one_hot(np.array([2, 2]), 4)
    g = input_gradient(model, x, target_class=2)
    coords = sample_coords(x.shape, rng, 100)
    num = numeric_grad(lambda: -attack_loss(model, x, target), x, coords)
    assert rel_err(g.ravel()[coords], num).max() < 1e-4


def test_epsilon_zero_is_identity(model):
    x = np.random.default_rng(0).random((2, 8, 8, 1))
    assert np.array_equal(perturb(model, x, AttackConfig(epsilon=0.0)), x)


@given(st.integers(0, 2**31), st.floats(0.0, 1.0), st.sampled_from(["scaled", "sign"]))
@settings(max_examples=40, deadline=None)
def test_budget_and_clamping(seed, eps, mode):
    m = build(parse_config(NET)).eval()
    r = np.random.default_rng(seed)
    x = r.random((2, 8, 8, 1))
    adv = perturb(m, x, AttackConfig(epsilon=eps, mode=mode), labels=one_hot(r.integers(0, 4, 2), 4))
    assert np.max(np.abs(adv - x)) <= eps * 1.0 + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_scaled_step_hits_budget_on_largest_pixel(model):
    x = np.full((1, 8, 8, 1), 0.5)
    adv = perturb(model, x, AttackConfig(epsilon=0.04))
    assert np.max(np.abs(adv - x)) == pytest.approx(0.04, abs=1e-15)


def test_untargeted_step_raises_loss(model):
    rng = np.random.default_rng(8)
    x = rng.random((4, 8, 8, 1)) * 0.5 + 0.25
    y = one_hot(np.array([0, 1, 2, 3]), 4)
    adv = perturb(model, x, AttackConfig(epsilon=0.01), labels=y)
    assert attack_loss(model, adv, y) > attack_loss(model, x, y)


def test_zero_gradient_raises():
    flat = build(parse_config(NET.replace("stddev=0.5 bias=0.1", "").replace("init=normal", "init=zeros"))).eval()
    x = np.random.default_rng(0).random((1, 8, 8, 1))
    with pytest.raises(ZeroGradientError):
        perturb(flat, x, AttackConfig(epsilon=0.1), labels=one_hot(np.array([1]), 4))


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        AttackConfig(mode="random")


def test_report_rows(model, tmp_path):
    rng = np.random.default_rng(1)
    ds = Dataset(rng.random((30, 8, 8, 1)), one_hot(rng.integers(0, 4, 30), 4))
    rows = robustness_report(model, ds, [0.0, 0.05, 0.2], chunk=7)
    assert [e for e, _ in rows] == [0.0, 0.05, 0.2]
    assert all(0.0 <= a <= 1.0 for _, a in rows)
    write_report(rows, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epsilon,adv_accuracy" and len(lines) == 4
