import numpy as np
import pytest

from spikedepth import autodiff as ad
from spikedepth.losses import (LossConfig, NoValidPixelsError, ResidualMap,
                               regression_loss, smoothness_loss, spike_penalty,
                               total_loss)
from spikedepth.snn import SpikeTensor


def make_residual(rng, h=6, w=6):
    pred = ad.constant(rng.normal(size=(h, w)).astype(np.float32))
    gt = rng.normal(size=(h, w)).astype(np.float32)
    valid = rng.random((h, w)) > 0.3
    valid.flat[0] = True   # keep at least one valid pixel
    return ResidualMap.from_prediction(pred, gt, valid), pred.values - gt, valid


def test_regression_equals_population_variance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rm, r, valid = make_residual(rng)
        got = float(regression_loss([rm]).values)
        expected = float(np.var(r[valid].astype(np.float64)))
        assert abs(got - expected) <= 1e-6


def test_regression_averages_over_scales():
    rng = np.random.default_rng(1)
    rms, expected = [], []
    for _ in range(4):
        rm, r, valid = make_residual(rng)
        rms.append(rm)
        expected.append(np.var(r[valid].astype(np.float64)))
    got = float(regression_loss(rms).values)
    assert abs(got - np.mean(expected)) <= 1e-6


def test_regression_is_offset_invariant():
    # the variance form ignores a constant shift of all residuals; the
    # absolute depth scale is anchored by the readout, not by this loss
    rng = np.random.default_rng(2)
    pred = rng.normal(size=(6, 6)).astype(np.float32)
    gt = rng.normal(size=(6, 6)).astype(np.float32)
    valid = np.ones((6, 6), dtype=bool)
    a = regression_loss([ResidualMap.from_prediction(ad.constant(pred), gt, valid)])
    b = regression_loss([ResidualMap.from_prediction(
        ad.constant(pred + 0.7), gt, valid)])
    assert abs(float(a.values) - float(b.values)) <= 1e-5


def smoothness_double_loop(r, valid):
    h, w = r.shape
    total = 0.0
    for i in range(h):
        for j in range(w - 1):
            if valid[i, j] and valid[i, j + 1]:
                total += abs(r[i, j + 1] - r[i, j])
    for i in range(h - 1):
        for j in range(w):
            if valid[i, j] and valid[i + 1, j]:
                total += abs(r[i + 1, j] - r[i, j])
    return total / valid.sum()


def test_smoothness_matches_double_loop():
    rng = np.random.default_rng(3)
    for _ in range(50):
        rm, r, valid = make_residual(rng)
        got = float(smoothness_loss([rm]).values)
        expected = smoothness_double_loop(r.astype(np.float64), valid)
        assert abs(got - expected) <= 1e-6


def test_smoothness_sums_over_scales():
    rng = np.random.default_rng(4)
    rm1, r1, v1 = make_residual(rng)
    rm2, r2, v2 = make_residual(rng, h=4, w=5)
    got = float(smoothness_loss([rm1, rm2]).values)
    expected = smoothness_double_loop(r1.astype(np.float64), v1) \
        + smoothness_double_loop(r2.astype(np.float64), v2)
    assert abs(got - expected) <= 1e-6


def test_spike_penalty_matches_hand_formula():
    rng = np.random.default_rng(5)
    layers, expected = [], 0.0
    for shape in ((4, 3, 3), (2, 5, 5), (1, 2, 2)):
        counts = rng.integers(0, 5, size=shape).astype(np.float32)
        layers.append(SpikeTensor(ad.constant(counts), max_count=4))
        expected += float((counts.astype(np.float64) ** 2).sum()) / (2 * counts.size)
    got = float(spike_penalty(layers).values)
    assert got == pytest.approx(expected, abs=1e-7)
    # binary tensors: S^2 == S, so the penalty is half the mean activity
    ones = SpikeTensor(ad.constant(np.ones((2, 3, 3), dtype=np.float32)), 1)
    assert float(spike_penalty([ones]).values) == 0.5


def test_total_loss_composition():
    reg = ad.constant(np.asarray(2.0))
    smooth = ad.constant(np.asarray(3.0))
    pen = ad.constant(np.asarray(10.0))
    cfg = LossConfig(lambda_smooth=0.5, lambda_spike=0.01)
    assert float(total_loss(reg, smooth, cfg).values) == pytest.approx(3.5)
    assert float(total_loss(reg, smooth, cfg, pen).values) == pytest.approx(3.6)


def test_default_penalized_layers_are_bottleneck_and_skip_sums():
    cfg = LossConfig()
    assert cfg.penalized_layers == ("out_rconv", "out_add4", "out_add3",
                                    "out_add2", "out_add1")


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_smooth=-0.1)
    with pytest.raises(ValueError):
        LossConfig(lambda_spike=-1.0)


def test_no_valid_pixels_raises():
    pred = ad.constant(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(NoValidPixelsError):
        ResidualMap.from_prediction(pred, np.zeros((4, 4)),
                                    np.zeros((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        regression_loss([])
    with pytest.raises(ValueError):
        smoothness_loss([])
    with pytest.raises(ValueError):
        spike_penalty([])


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    gt = rng.normal(size=(5, 5)).astype(np.float32)
    valid = rng.random((5, 5)) > 0.2
    valid.flat[0] = True
    cfg = LossConfig()

    def f(x):
        rm = ResidualMap.from_prediction(x, gt, valid)
        return total_loss(regression_loss([rm]), smoothness_loss([rm]), cfg)

    x = ad.parameter(rng.normal(size=(5, 5)))
    assert ad.grad_check(f, x) <= 1e-3


def test_three_dim_prediction_is_squeezed():
    rng = np.random.default_rng(7)
    pred = ad.constant(rng.normal(size=(1, 4, 4)).astype(np.float32))
    rm = ResidualMap.from_prediction(pred, np.zeros((4, 4)),
                                     np.ones((4, 4), dtype=bool))
    assert rm.r.values.shape == (4, 4)
