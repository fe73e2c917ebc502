import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iman.exceptions import ConfigurationError
from iman.metrics import auc
from iman.synthetic import SyntheticSpec, gen_synthetic


def test_noiseless_ebv_projection_separates():
    c = gen_synthetic(SyntheticSpec(n_samples=200, image_shape=(1, 8, 8), noise_scale=0.0, seed=1))
    u = c.ebv[np.argmax(c.ebv @ c.ebv[c.labels == 1][0])]
    u = u / np.linalg.norm(u)  # every row is a multiple of the planted direction
    assert auc(c.ebv @ u, c.labels) == 1.0


@given(st.integers(10, 400), st.integers(0, 2**32 - 1))
def test_balance_and_splits(n, seed):
    c = gen_synthetic(SyntheticSpec(n_samples=n, image_shape=(1, 4, 4), seed=seed))
    assert abs(c.labels.mean() - 0.5) <= 0.05 or n < 200
    assert c.labels.sum() == (n + 1) // 2
    counts = {s: int(np.sum(c.split == s)) for s in ("train", "val", "test")}
    assert counts["train"] == round(0.7 * n) and counts["val"] == round(0.15 * n)
    assert sum(counts.values()) == n
    assert c.present.all()


def test_blob_peak_monotone_in_latent():
    c = gen_synthetic(SyntheticSpec(n_samples=50, image_shape=(1, 8, 8), noise_scale=0.0, seed=2))
    peak = c.images[:, 0, 0, 3:5, 3:5].mean(axis=(1, 2))
    proj = c.ebv @ c.ebv[np.flatnonzero(c.labels == 1)[0]]
    order = np.argsort(proj)
    assert np.all(np.diff(peak[order]) >= -1e-12)


def test_same_seed_same_bytes():
    a = gen_synthetic(SyntheticSpec(n_samples=30, image_shape=(1, 8, 8), seed=5))
    b = gen_synthetic(SyntheticSpec(n_samples=30, image_shape=(1, 8, 8), seed=5))
    assert a.equals(b)
    assert a.images.tobytes() == b.images.tobytes()
    assert not a.equals(gen_synthetic(SyntheticSpec(n_samples=30, image_shape=(1, 8, 8), seed=6)))


def test_null_signal_auc_stays_near_half():
    """At signal 0 a fixed scorer's AUC over 500 samples lies in [0.4, 0.6]
    for at least 95% of cohorts, as does a label-permutation null."""
    inside, perm_inside = 0, 0
    trials = 100
    for seed in range(trials):
        c = gen_synthetic(SyntheticSpec(n_samples=500, image_shape=(1, 4, 4), signal_strength=0.0, seed=seed))
        score = c.ebv[:, 0] + c.images[:, 0, 0, 2, 2]
        inside += 0.4 <= auc(score, c.labels) <= 0.6
        perm = np.random.default_rng(seed).permutation(c.labels)
        perm_inside += 0.4 <= auc(score, perm) <= 0.6
    assert inside >= 0.95 * trials
    assert perm_inside >= 0.95 * trials


@pytest.mark.parametrize(
    "kw", [{"n_samples": 9}, {"split_fractions": (0.5, 0.2, 0.2)}, {"noise_scale": -1.0}, {"split_fractions": (1, 0)}]
)
def test_spec_errors(kw):
    with pytest.raises(ConfigurationError):
        SyntheticSpec(**kw)
