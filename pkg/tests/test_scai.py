import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iman import oracles
from iman.exceptions import ConfigurationError, DimensionError, ParameterError
from iman.numerics import Tensor, grad_check_params, make_rng
from iman.scai import (
    RotaryFrequencies,
    apply_rotation,
    attention_weights,
    init_attention_params,
    rotary_score,
    scai_attention,
)


def params(rng, d=8, h=2):
    return init_attention_params(d, h, rng, std=0.5)


def weights(p):
    return [t.data for t in (p.w_q, p.w_k, p.w_v, p.w_o)]


def test_theta_schedule():
    f = RotaryFrequencies(8)
    assert f.theta[0] == 1.0
    assert np.all(np.diff(f.theta) < 0)
    np.testing.assert_allclose(f.theta, 10000.0 ** (-2.0 * np.arange(4) / 8), rtol=1e-15)


def test_odd_head_dim_rejected_at_construction():
    with pytest.raises(ConfigurationError):
        RotaryFrequencies(5)


def test_position_zero_is_identity(rng):
    x = rng.normal(size=8)
    np.testing.assert_array_equal(apply_rotation(Tensor(x), 0, RotaryFrequencies(8)).data, x)


def test_quarter_turn():
    f = RotaryFrequencies(2, scale=math.pi / 2)
    np.testing.assert_allclose(apply_rotation(Tensor([1.0, 0.0]), 1, f).data, [0.0, 1.0], atol=1e-15)


def test_rotation_matches_block_oracle_and_preserves_norm(rng):
    x = rng.normal(size=8)
    out = apply_rotation(Tensor(x), 7, RotaryFrequencies(8)).data
    np.testing.assert_allclose(out, oracles.rotation_matrix(7, 8) @ x, atol=1e-14)
    assert abs(np.linalg.norm(out) - np.linalg.norm(x)) <= 1e-12


def test_equal_positions_give_plain_dot(rng):
    q, k = rng.normal(size=8), rng.normal(size=8)
    assert rotary_score(q, k, 4, 4, RotaryFrequencies(8)) == pytest.approx(q @ k, abs=1e-12)


def test_two_dim_closed_form():
    f = RotaryFrequencies(2, scale=math.pi / 3)
    assert rotary_score([1.0, 0.0], [1.0, 0.0], 3, 2, f) == pytest.approx(0.5, abs=1e-15)


@given(st.integers(0, 2**32 - 1), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_shift_invariance(seed, s, t, delta):
    rng = make_rng(seed, "shift")
    q, k = rng.normal(size=16), rng.normal(size=16)
    f = RotaryFrequencies(16)
    assert abs(rotary_score(q, k, s, t, f) - rotary_score(q, k, s + delta, t + delta, f)) <= 1e-9


def test_single_token_output(rng):
    p = params(rng)
    x = rng.normal(size=(1, 8))
    for pos in (0, 13):
        out = scai_attention(Tensor(x), [pos], p, RotaryFrequencies(4)).data
        np.testing.assert_allclose(out, x @ p.w_v.data @ p.w_o.data, atol=1e-14)


def test_relative_positions_only(rng):
    p = params(rng)
    x = np.repeat(rng.normal(size=(1, 8)), 2, axis=0)
    f = RotaryFrequencies(4)
    a = scai_attention(Tensor(x), [0, 1], p, f).data
    b = scai_attention(Tensor(x), [5, 6], p, f).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_matches_dense_oracle(rng):
    p = params(rng)
    X = rng.normal(size=(3, 8))
    pos = [0, 2, 7]
    got = scai_attention(Tensor(X), pos, p, RotaryFrequencies(4)).data
    np.testing.assert_allclose(got, oracles.rotary_attention_dense(X, pos, *weights(p), 2), atol=1e-10)


def test_key_mask_matches_dense_oracle(rng):
    p = params(rng)
    X = rng.normal(size=(5, 8))
    mask = np.array([True, True, False, True, False])
    got = scai_attention(Tensor(X), np.arange(5), p, RotaryFrequencies(4), mask).data
    want = oracles.rotary_attention_dense(X, np.arange(5), *weights(p), 2, key_mask=mask)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_zero_angles_equal_position_free_attention(rng):
    p = params(rng)
    X = rng.normal(size=(4, 8))
    got = scai_attention(Tensor(X), [0, 9, 3, 40], p, RotaryFrequencies(4, scale=0.0)).data
    # position-free attention written out directly
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        Q, K, V = X @ p.w_q.data[:, sl], X @ p.w_k.data[:, sl], X @ p.w_v.data[:, sl]
        S = Q @ K.T / 2.0
        A = np.exp(S - S.max(axis=1, keepdims=True))
        heads.append(A / A.sum(axis=1, keepdims=True) @ V)
    np.testing.assert_allclose(got, np.concatenate(heads, axis=1) @ p.w_o.data, atol=1e-10)


@given(st.integers(0, 2**32 - 1), st.integers(1, 7))
def test_attention_rows_sum_to_one(seed, n):
    rng = make_rng(seed, "rows")
    p = params(rng)
    A = attention_weights(Tensor(rng.normal(size=(n, 8)) * 3), np.arange(n), p, RotaryFrequencies(4)).data
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)


def test_errors(rng):
    p = params(rng)
    with pytest.raises(DimensionError):
        scai_attention(Tensor(np.zeros((0, 8))), [], p, RotaryFrequencies(4))
    with pytest.raises(ParameterError):
        scai_attention(Tensor(np.zeros((2, 8))), [0, -1], p, RotaryFrequencies(4))


def test_batched_matches_single(rng):
    p = params(rng)
    X = rng.normal(size=(2, 4, 8))
    f = RotaryFrequencies(4)
    out = scai_attention(Tensor(X), np.arange(4), p, f).data
    for b in range(2):
        np.testing.assert_allclose(out[b], scai_attention(Tensor(X[b]), np.arange(4), p, f).data, atol=1e-14)


def test_gradients(rng):
    p = params(rng)
    X = Tensor(rng.normal(size=(4, 8)))
    R = rng.normal(size=(4, 8))
    mask = np.array([True, False, True, True])
    reports = grad_check_params(
        lambda: (scai_attention(X, [0, 1, 5, 6], p, RotaryFrequencies(4), mask) * R).sum(), {"X": X, **p.tensors()}
    )
    assert all(r.passed for r in reports.values())
