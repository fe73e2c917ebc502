import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_sample
from iman.data import MODALITIES
from iman.exceptions import ConstraintError, DimensionError, ParameterError
from iman.missingness import (
    MissingnessTable,
    PresencePattern,
    apply_missing,
    build_table,
    init_prompt_bank,
    mask_cohort,
    missing_rate,
    read_table_csv,
    select_prompts,
    select_prompts_batch,
    write_table_csv,
)
from iman.numerics import Tensor, make_rng

M = len(MODALITIES)


def test_single_column_rounding():
    t = build_table(10, [0.2, 0, 0, 0, 0], 0)
    assert t.column_counts().tolist() == [2, 0, 0, 0, 0]


def test_cohort_of_1224_rounds_to_245():
    t = build_table(1224, [0.2, 0, 0, 0, 0], 0)
    assert t.column_counts()[0] == 245
    assert missing_rate(t, 0) == 245 / 1224
    assert missing_rate(t, 0) == pytest.approx(0.200163, abs=1e-6)


def test_zero_rates_give_zero_table():
    assert not build_table(30, [0.0] * M, 4).bits.any()


def test_missing_rate_extremes():
    bits = np.zeros((4, M), dtype=np.uint8)
    bits[:, 1] = 1
    t = MissingnessTable(bits)
    assert missing_rate(t, 0) == 0.0 and missing_rate(t, 1) == 1.0
    with pytest.raises(ParameterError):
        missing_rate(t, M)


rates_st = st.lists(st.floats(0, 1), min_size=M, max_size=M)


@given(st.integers(1, 300), rates_st, st.integers(0, 2**32 - 1))
def test_counts_exact_and_rows_keep_a_modality(n, rates, seed):
    counts = [int(round(n * r)) for r in rates]
    if sum(counts) > n * (M - 1):
        with pytest.raises(ConstraintError, match="row bound"):
            build_table(n, rates, seed)
        return
    t = build_table(n, rates, seed)
    assert t.column_counts().tolist() == counts
    assert np.all(t.bits.sum(axis=1) < M)
    for k in range(M):
        assert missing_rate(t, k) == counts[k] / n


def test_tight_bound_feasible():
    t = build_table(50, [0.8] * M, 1)
    assert np.all(t.bits.sum(axis=1) == M - 1)


def test_deterministic_for_seed():
    a = build_table(200, [0.3, 0.1, 0.5, 0.2, 0.4], 9)
    b = build_table(200, [0.3, 0.1, 0.5, 0.2, 0.4], 9)
    assert a.bits.tobytes() == b.bits.tobytes()
    assert a.bits.tobytes() != build_table(200, [0.3, 0.1, 0.5, 0.2, 0.4], 10).bits.tobytes()


def test_generator_and_int_seed_agree():
    a = build_table(50, [0.2] * M, 3)
    b = build_table(50, [0.2] * M, make_rng(3, "mask"))
    assert np.array_equal(a.bits, b.bits)


@pytest.mark.parametrize("rates", [[1.2, 0, 0, 0, 0], [-0.1, 0, 0, 0, 0], [float("nan")] * M])
def test_invalid_rates(rates):
    with pytest.raises(ParameterError):
        build_table(10, rates, 0)


def test_table_invariants():
    with pytest.raises(ConstraintError):
        MissingnessTable(np.ones((2, M)))
    t = build_table(5, [0.2] * M, 0)
    with pytest.raises(ValueError):
        t.bits[0, 0] = 1
    with pytest.raises(ConstraintError):
        PresencePattern((False,) * M)


def test_apply_missing_identity(rng):
    s = make_sample(rng)
    out = apply_missing(s, (0,) * M)
    assert out.present == s.present
    np.testing.assert_array_equal(out.ebv, s.ebv)


def test_apply_missing_masks_and_keeps_label(rng):
    s = make_sample(rng, label=1)
    out = apply_missing(s, (1, 0, 0, 1, 0))
    assert out.present == (False, True, True, False, True)
    assert out.label == 1
    assert not out.ebv.any() and not out.images[1].any()
    np.testing.assert_array_equal(out.normal, s.normal)
    np.testing.assert_array_equal(out.images[0], s.images[0])
    again = apply_missing(out, (1, 0, 0, 1, 0))
    assert again.present == out.present
    np.testing.assert_array_equal(again.ebv, out.ebv)


def test_apply_missing_cannot_empty(rng):
    s = make_sample(rng, present=(True, False, False, False, False))
    with pytest.raises(ConstraintError):
        apply_missing(s, (1, 0, 0, 0, 0))


def test_mask_cohort_matches_per_sample(small_cohort):
    t = build_table(len(small_cohort), [0.3, 0.2, 0.1, 0.4, 0.2], 2)
    masked = mask_cohort(small_cohort, t)
    for i in range(len(small_cohort)):
        want = apply_missing(small_cohort.sample(i), t.bits[i])
        got = masked.sample(i)
        assert got.present == want.present and got.label == want.label
        np.testing.assert_array_equal(got.ebv, want.ebv)
        np.testing.assert_array_equal(np.stack(got.images), np.stack(want.images))
    with pytest.raises(DimensionError):
        mask_cohort(small_cohort, build_table(3, [0.0] * M, 0))


def test_prompt_selection(rng):
    bank = init_prompt_bank(M, 2, 4, rng)
    allp = select_prompts(PresencePattern.all_present(), bank).data
    np.testing.assert_array_equal(allp, bank.present.data.reshape(M * 2, 4))
    a = select_prompts(PresencePattern((True, True, False, True, True)), bank).data
    b = select_prompts(PresencePattern((True, True, True, True, True)), bank).data
    differ = np.flatnonzero(np.any(a != b, axis=1))
    assert differ.tolist() == [4, 5]


def test_prompts_independent_of_sample_values(rng):
    bank = init_prompt_bank(M, 2, 4, rng)
    bits = np.array([[True, False, True, True, False]] * 2)
    out = select_prompts_batch(bits, bank).data
    np.testing.assert_array_equal(out[0], out[1])
    assert np.abs(bank.present.data).max() < 0.02 * 6


def test_unused_absent_block_gets_zero_gradient(rng):
    bank = init_prompt_bank(M, 2, 4, rng)
    for t in bank.tensors().values():
        t.requires_grad = True
    bits = np.array([[True, True, False, True, True], [True, True, True, True, True]])
    R = rng.normal(size=(2, M * 2, 4))
    (select_prompts_batch(bits, bank) * R).sum().backward()
    absent_grad = bank.absent.grad
    assert np.all(absent_grad[[0, 1, 3, 4]] == 0.0)
    assert np.abs(absent_grad[2]).max() > 0


def test_table_csv_round_trip(tmp_path):
    t = build_table(12, [0.25, 0.0, 0.5, 0.1, 0.3], 5)
    path = tmp_path / "table.csv"
    write_table_csv(path, t, np.arange(100, 112))
    assert path.read_text().splitlines()[0] == "sample_id,ebv,normal,t1,t1c,t2"
    ids, back = read_table_csv(path)
    assert ids.tolist() == list(range(100, 112))
    assert np.array_equal(back.bits, t.bits)
