import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iman import oracles
from iman.cafa import (
    base_positions,
    cafa_forward,
    init_cafa_params,
    initial_coordinates,
    output_size,
    predict_offsets,
    resample_bilinear,
)
from iman.exceptions import DimensionError, EvaluationError, ParameterError
from iman.numerics import Tensor, grad_check_params, make_rng
from iman.verify import _cafa_random


def test_coordinates_small_cases():
    assert initial_coordinates(1).coords == ((0, 0),)
    assert initial_coordinates(9).coords == tuple((r, c) for r in range(3) for c in range(3))
    assert initial_coordinates(5).coords == ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0))


def test_coordinates_round_half_even():
    # sqrt(2) rounds to 1: a single column of two rows
    assert initial_coordinates(2).coords == ((0, 0), (1, 0))


@pytest.mark.parametrize("k", range(1, 26))
def test_coordinates_match_meshgrid_reimplementation(k):
    coords = initial_coordinates(k).coords
    assert list(coords) == oracles.algorithm1_coords(k)
    assert len(set(coords)) == k
    assert min(min(c) for c in coords) >= 0


def test_coordinates_reject_nonpositive():
    with pytest.raises(ParameterError):
        initial_coordinates(0)


def test_zero_init_offsets(rng):
    p = init_cafa_params(2, 5)
    assert np.all(predict_offsets(Tensor(rng.normal(size=(2, 6, 6))), p).data == 0.0)


def test_single_tap_offsets_on_constant_input():
    p = init_cafa_params(1, 2)
    p.offset_weight.data[:, 0, 1, 1] = 0.5  # centre tap only
    p.offset_bias.data[:] = [1.0, -1.0, 2.0, 0.25]
    off = predict_offsets(Tensor(np.full((1, 5, 5), 3.0)), p).data
    np.testing.assert_allclose(off, np.broadcast_to((1.5 + p.offset_bias.data)[:, None, None], off.shape))
    p.offset_weight.data[:] = 0.0
    off = predict_offsets(Tensor(np.full((1, 5, 5), 3.0)), p).data
    np.testing.assert_array_equal(off, np.broadcast_to(p.offset_bias.data[:, None, None], off.shape))


def test_offsets_match_sliding_window(rng):
    p = _cafa_random(rng, 2, 5, 1)
    p.offset_weight.data = rng.normal(size=p.offset_weight.shape)
    I = rng.normal(size=(2, 5, 6))
    want = oracles.conv2d_loops(I, p.offset_weight.data, p.offset_bias.data, 1, 1)
    np.testing.assert_allclose(predict_offsets(Tensor(I), p).data, want, atol=1e-10)


def _point(r, c, n=1):
    return Tensor(np.array([r, c], dtype=float).reshape(2, 1, 1))


def test_bilinear_integer_position(rng):
    I = rng.normal(size=(2, 4, 5))
    np.testing.assert_array_equal(resample_bilinear(Tensor(I), _point(2, 3)).data[:, 0, 0, 0], I[:, 2, 3])


def test_bilinear_centre_of_four():
    I = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert resample_bilinear(Tensor(I), _point(0.5, 0.5)).data.item() == pytest.approx(2.5, abs=1e-15)


def test_bilinear_outside_is_zero(rng):
    assert resample_bilinear(Tensor(rng.normal(size=(1, 3, 3))), _point(-1, -1)).data.item() == 0.0


def test_bilinear_nonfinite_position():
    with pytest.raises(EvaluationError):
        resample_bilinear(Tensor(np.ones((1, 2, 2))), _point(np.nan, 0.0))


@given(st.floats(-3, 8, allow_nan=False), st.floats(-3, 8, allow_nan=False), st.integers(0, 2**32 - 1))
def test_bilinear_matches_corner_enumeration(r, c, seed):
    I = make_rng(seed, "bil").normal(size=(1, 5, 6))
    got = resample_bilinear(Tensor(I), _point(r, c)).data.item()
    assert got == pytest.approx(oracles.bilinear_point(I[0], r, c), abs=1e-12)


@given(st.floats(0, 3.999, allow_nan=False), st.floats(0, 4.999, allow_nan=False))
def test_bilinear_weights_sum_to_one_in_range(r, c):
    assert abs(sum(oracles.bilinear_corner_weights(r, c)) - 1.0) <= 1e-12
    # a constant image reproduces the constant wherever all corners are in range
    I = np.full((1, 5, 6), 2.0)
    assert resample_bilinear(Tensor(I), _point(r, c)).data.item() == pytest.approx(2.0, abs=1e-12)


def test_box_filter_degeneracy(rng):
    I = rng.normal(size=(2, 7, 7))
    out = cafa_forward(Tensor(I), init_cafa_params(2, 9)).data
    np.testing.assert_allclose(out[:, :5, :5], oracles.box_filter(I, 3)[:, :5, :5], atol=1e-10)


def test_single_point_identity(rng):
    I = rng.normal(size=(3, 5, 4))
    p = init_cafa_params(3, 1)
    np.testing.assert_array_equal(cafa_forward(Tensor(I), p).data, I)


@pytest.mark.parametrize("k,stride", [(5, 1), (4, 2), (7, 1), (3, 3)])
def test_zero_offset_matches_fixed_grid_conv(rng, k, stride):
    p = init_cafa_params(2, k, stride)
    p.depthwise_weights.data = rng.normal(size=(2, k))
    I = rng.normal(size=(2, 7, 6))
    got = cafa_forward(Tensor(I), p).data
    # fixed-grid depthwise convolution with zero padding on the far edges
    Ho, Wo = output_size(7, 6, stride)
    want = np.zeros((2, Ho, Wo))
    pad = np.zeros((2, 7 + 8, 6 + 8))
    pad[:, :7, :6] = I
    for n, (dr, dc) in enumerate(p.geometry.coords):
        want += p.depthwise_weights.data[:, n, None, None] * pad[:, dr : dr + Ho * stride : stride, dc : dc + Wo * stride : stride]
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_matches_exhaustive_enumeration(rng):
    p = _cafa_random(rng, 2, 5, 1)
    p.offset_weight.data = rng.normal(scale=0.5, size=p.offset_weight.shape)  # large offsets, some out of range
    I = rng.normal(size=(2, 5, 5))
    want = oracles.cafa_enumerate(I, p.geometry.coords, p.offset_weight.data, p.offset_bias.data, p.depthwise_weights.data)
    np.testing.assert_allclose(cafa_forward(Tensor(I), p).data, want, atol=1e-10)


def test_base_positions_layout():
    g = initial_coordinates(5)
    P = base_positions(g, 3, 2, 2)
    assert P.shape == (10, 3, 2)
    assert P[4, 2, 1] == 2 + 4  # point (2, 0), output row 2 at stride 2
    assert P[5 + 1, 2, 1] == 1 + 2  # column of point (0, 1), output col 1


def test_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        cafa_forward(Tensor(rng.normal(size=(3, 4, 4))), init_cafa_params(2, 5))


def test_gradients_through_positions(rng):
    p = _cafa_random(rng, 2, 5, 1)
    I = Tensor(rng.normal(size=(2, 5, 5)))
    R = rng.normal(size=(2, 5, 5))
    reports = grad_check_params(lambda: (cafa_forward(I, p) * R).sum(), {"I": I, **p.tensors()})
    assert all(r.passed for r in reports.values()), {k: r.max_relative_error for k, r in reports.items()}
    # the offset weights only act through the sample positions
    assert np.abs(p.offset_weight.grad).max() > 0


def test_gradients_strided_batch(rng):
    p = _cafa_random(rng, 1, 4, 2)
    I = Tensor(rng.normal(size=(2, 1, 6, 6)))
    R = rng.normal(size=(2, 1, 3, 3))
    reports = grad_check_params(lambda: (cafa_forward(I, p) * R).sum(), {"I": I, **p.tensors()})
    assert all(r.passed for r in reports.values())
