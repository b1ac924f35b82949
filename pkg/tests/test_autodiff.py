import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from spikedepth import autodiff as ad


@pytest.fixture
def float64_mode():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float32)


def test_gradient_suite_float32():
    results = ad.gradient_suite(n_instances=20, seed=0)
    assert set(results) >= {"conv2d_input", "conv2d_weight", "nn_upsample",
                            "encoder_composite"}
    worst = max(results.values())
    assert worst <= 1e-3, results


def test_gradient_suite_float64(float64_mode):
    results = ad.gradient_suite(n_instances=20, seed=1)
    assert max(results.values()) <= 1e-5, results


def test_spike_threshold_forward_is_binary():
    rng = np.random.default_rng(0)
    x = ad.constant(rng.normal(size=(4, 7, 7)) * 3)
    out = ad.spike_threshold(x)
    assert set(np.unique(out.values)) <= {0.0, 1.0}
    assert np.array_equal(out.values, (x.values >= 1.0).astype(np.float32))


def test_spike_threshold_backward_matches_closed_form():
    grid = np.linspace(-5.0, 5.0, 2001)
    for alpha in (0.5, 2.0, 4.0):
        cfg = ad.SurrogateConfig(alpha=alpha)
        x = ad.parameter(grid + 1.0)   # center on the threshold
        with ad.Tape() as tape:
            out = ad.sum_reduce(ad.spike_threshold(x, 1.0, cfg))
            ad.backward(out, tape)
        expected = ad.surrogate_derivative(grid, alpha)
        assert np.max(np.abs(x.grad - expected)) <= 1e-6


def test_conv2d_values_match_direct_convolution():
    rng = np.random.default_rng(2)
    x = ad.constant(rng.normal(size=(2, 7, 6)))
    w = ad.constant(rng.normal(size=(3, 2, 3, 3)))
    for stride, padding in ((1, 0), (1, 1), (2, 1)):
        out = ad.conv2d(x, w, stride=stride, padding=padding)
        xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
        ho = ad.conv_out_size(7, 3, stride, padding)
        wo = ad.conv_out_size(6, 3, stride, padding)
        ref = np.zeros((3, ho, wo))
        for co in range(3):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[:, i * stride:i * stride + 3,
                               j * stride:j * stride + 3]
                    ref[co, i, j] = (patch * w.values[co]).sum()
        assert out.values.shape == ref.shape
        np.testing.assert_allclose(out.values, ref, atol=1e-4)


def test_conv2d_shape_errors():
    x = ad.constant(np.zeros((2, 5, 5)))
    with pytest.raises(ad.ShapeMismatchError):
        ad.conv2d(x, ad.constant(np.zeros((3, 4, 3, 3))))     # wrong C_in
    with pytest.raises(ad.ShapeMismatchError):
        ad.conv2d(x, ad.constant(np.zeros((3, 2, 2, 2))))     # even kernel
    with pytest.raises(ad.ShapeMismatchError):
        ad.conv2d(ad.constant(np.zeros((5, 5))), ad.constant(np.zeros((3, 2, 3, 3))))
    with pytest.raises(ad.ShapeMismatchError, match="layer 'enc1'"):
        ad.conv2d(x, ad.constant(np.zeros((3, 4, 3, 3))), layer="enc1")


def test_nn_upsample_replicates_blocks():
    x = ad.constant(np.arange(8.0).reshape(2, 2, 2))
    out = ad.nn_upsample(x, 2)
    assert out.values.shape == (2, 4, 4)
    for i in range(4):
        for j in range(4):
            assert out.values[0, i, j] == x.values[0, i // 2, j // 2]
    with pytest.raises(ValueError):
        ad.nn_upsample(x, 3)


def test_nn_upsample_preserves_integrality():
    rng = np.random.default_rng(3)
    x = ad.constant(rng.integers(0, 4, size=(3, 4, 4)).astype(np.float32))
    out = ad.nn_upsample(x, 4)
    assert np.array_equal(out.values, np.round(out.values))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, (3, 5), elements=st.floats(-10, 10, width=32)))
def test_masked_select_scatters_gradient(values):
    mask = np.zeros((3, 5), dtype=bool)
    mask[::2, 1::2] = True
    x = ad.parameter(values)
    with ad.Tape() as tape:
        out = ad.sum_reduce(ad.masked_select(x, mask))
        ad.backward(out, tape)
    assert np.array_equal(x.grad, mask.astype(np.float32))


def test_diff_matches_numpy():
    rng = np.random.default_rng(4)
    x = ad.constant(rng.normal(size=(3, 4, 5)))
    np.testing.assert_array_equal(ad.diff_x(x).values, np.diff(x.values, axis=-1))
    np.testing.assert_array_equal(ad.diff_y(x).values, np.diff(x.values, axis=-2))
    with pytest.raises(ad.ShapeMismatchError):
        ad.diff_x(ad.constant(np.zeros((3, 1))))


def test_backward_accumulates_over_shared_input():
    x = ad.parameter(np.array([2.0, 3.0]))
    with ad.Tape() as tape:
        out = ad.sum_reduce(ad.add(ad.square(x), ad.square(x)))
        ad.backward(out, tape)
    np.testing.assert_allclose(x.grad, 4.0 * x.values)


def test_backward_requires_scalar_and_tape():
    x = ad.parameter(np.zeros((2, 2)))
    with ad.Tape() as tape:
        y = ad.square(x)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(y, tape)
    with pytest.raises(ValueError, match="tape"):
        ad.backward(ad.sum_reduce(ad.square(x)), None)


def test_no_tape_records_nothing():
    x = ad.parameter(np.ones(3))
    y = ad.square(x)          # outside any Tape
    assert y.node is None


def test_constants_are_not_tracked():
    with ad.Tape() as tape:
        c = ad.constant(np.ones(3))
        ad.square(c)
    assert tape.nodes == []


def test_tensor_operator_sugar():
    a = ad.constant(np.array([1.0, 2.0]))
    b = ad.constant(np.array([3.0, 5.0]))
    np.testing.assert_array_equal((a + b).values, [4.0, 7.0])
    np.testing.assert_array_equal((b - a).values, [2.0, 3.0])
    np.testing.assert_array_equal((2 * a).values, [2.0, 4.0])
    with pytest.raises(TypeError):
        a * b


def test_default_dtype_switch(float64_mode):
    assert ad.Tensor(np.zeros(2)).values.dtype == np.float64
    with pytest.raises(ValueError):
        ad.set_default_dtype(np.int32)


def test_surrogate_config_validation():
    with pytest.raises(ValueError):
        ad.SurrogateConfig(alpha=0.0)
