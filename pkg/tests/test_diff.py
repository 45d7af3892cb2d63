import math

import numpy as np
import pytest

from ctp.diff import (
    check_feature_grad,
    distance_backward,
    finite_diff_check,
    gradcheck_sweep,
    grad_loss,
    loss_and_grad_features,
    oracle_sweep,
    brute_force_loss,
    brute_force_pairwise_loss,
)
from ctp.losses import LOSS_TAGS, LossConfig, pairwise_loss


@pytest.mark.parametrize("tag", LOSS_TAGS)
@pytest.mark.parametrize("b", [2, 3, 5])
def test_feature_gradients(tag, b):
    rng = np.random.default_rng([b, 7])
    t, i, p = (rng.standard_normal((b, 6)) for _ in range(3))
    report = check_feature_grad(LossConfig.from_tag(tag), t, i, p, 1.3)
    assert report.max_rel_error <= 1e-6, report.per_parameter


@pytest.mark.parametrize("tag", ["ctp_mask", "pairwise"])
def test_mean_reduction_gradients(tag):
    rng = np.random.default_rng(3)
    t, i, p = (rng.standard_normal((4, 5)) for _ in range(3))
    cfg = LossConfig.from_tag(tag, reduction="mean")
    assert check_feature_grad(cfg, t, i, p, 0.4).passed(1e-6)


def test_gradient_keys_and_shapes(rng):
    t, i, p = (rng.standard_normal((3, 4)) for _ in range(3))
    loss, g = grad_loss(LossConfig.from_tag("ctp_mask"), {"text": t, "image": i, "point": p, "log_scale": 1.0})
    assert set(g) == {"text", "image", "point", "log_scale"}
    assert g["text"].shape == (3, 4) and g["log_scale"].shape == ()
    assert math.isfinite(loss)


def test_scale_gradient_zero_when_clamped(rng):
    t, i, p = (rng.standard_normal((3, 4)) for _ in range(3))
    _, g = loss_and_grad_features(LossConfig.from_tag("ctp_mask"), t, i, p, math.log(150.0))
    assert g["log_scale"] == 0.0


def test_coincident_distance_gradient_is_zero():
    x = np.array([[1.0, 0.0]])
    gx, gy = distance_backward(x, x, np.ones((1, 1)))
    assert np.all(gx == 0) and np.all(gy == 0)


def test_coincident_triples_finite():
    e = np.tile([1.0, 0.0, 0.0], (3, 1))
    loss, g = loss_and_grad_features(LossConfig.from_tag("ctp_mask"), e, e, e, 1.0)
    assert math.isfinite(loss) and all(np.all(np.isfinite(v)) for v in g.values())


def test_sign_flip_is_caught(rng):
    t, i, p = (rng.standard_normal((4, 5)) for _ in range(3))
    report = check_feature_grad(LossConfig.from_tag("ctp_mask"), t, i, p, 1.0, corrupt="image")
    assert report.per_parameter["image"] > 1.0
    assert not report.passed(1e-6)


def test_quadratic_exact():
    def f(a):
        return float(np.sum(a["x"] ** 2)), {"x": 2 * a["x"]}

    rep = finite_diff_check(f, {"x": np.array([1.0, -2.0, 3.0])}, elementwise=True)
    assert rep.max_rel_error < 1e-9


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        finite_diff_check(lambda a: (0.0, {}), {"x": np.zeros(1)}, epsilon=0.0)


def test_encoder_sweep_one_seed():
    for tag, seed, report in gradcheck_sweep(seeds=[5], b=3, d=4):
        assert report.passed(1e-6), (tag, report.per_parameter)


def test_oracle_sweep_small():
    errs = [e for *_, e in oracle_sweep(bs=(2, 3), seeds=range(3))]
    assert len(errs) == 4 * 2 * 3 and max(errs) <= 1e-10


def test_pairwise_oracle(rng):
    t, i, p = (rng.standard_normal((4, 3)) for _ in range(3))
    coeffs = (0.2, 0.3, 0.5)
    assert pairwise_loss(t, i, p, coeffs, 6.0).total == pytest.approx(
        brute_force_pairwise_loss(t, i, p, coeffs, 6.0), abs=1e-12)


def test_oracle_refuses_large_batches(rng):
    x = rng.standard_normal((17, 2))
    with pytest.raises(ValueError):
        brute_force_loss(x, x, x)
