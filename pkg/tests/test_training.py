import dataclasses

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from iman.data import Cohort
from iman.exceptions import ConfigurationError, TrainingError
from iman.metrics import EvalReport
from iman.model import ImanModel, ModelConfig
from iman.numerics import Tensor, make_rng
from iman.training import (
    SWEEP_HEADER,
    AdamW,
    Scenario,
    TrainConfig,
    degradation_summary,
    evaluate,
    lr_at,
    predict_scores,
    sweep_missing,
    train,
    write_history_csv,
    write_sweep_csv,
)


def test_full_scale_schedule_landmarks():
    tc = TrainConfig.full_scale()
    total = 1000
    warm = int(round(tc.warmup_fraction * total))
    assert lr_at(0, total, tc.learning_rate, tc.warmup_fraction) == 0.0
    assert lr_at(warm, total, tc.learning_rate, tc.warmup_fraction) == 1e-4
    assert lr_at(total, total, tc.learning_rate, tc.warmup_fraction) == 0.0
    assert lr_at(warm // 2, total, 1e-4, 0.1) == pytest.approx(0.5e-4, rel=1e-12)
    assert lr_at(550, total, 1e-4, 0.1) == pytest.approx(0.5e-4, rel=1e-12)


@pytest.mark.parametrize("total,frac", [(10, 0.1), (97, 0.25), (500, 0.0), (3, 0.5)])
def test_schedule_is_piecewise_linear_and_continuous(total, frac):
    peak = 2e-3
    lrs = np.array([lr_at(s, total, peak, frac) for s in range(total + 1)])
    assert lrs.max() == peak
    assert lrs.min() >= 0 and lrs[-1] == 0.0
    warm = int(round(frac * total))
    # second differences vanish away from the single corner
    d2 = np.diff(lrs, 2)
    corner = np.zeros_like(d2, dtype=bool)
    if warm >= 1:
        corner[warm - 1] = True
    assert np.all(np.abs(d2[~corner]) <= 1e-15)
    assert np.all(np.abs(np.diff(lrs)) <= peak / max(min(warm, total - warm), 1) + 1e-15)


def test_adamw_matches_scalar_loop():
    rng = make_rng(0, "adam")
    p0 = rng.normal(size=3)
    grads = rng.normal(size=(4, 3))
    p = Tensor(p0.copy())
    opt = AdamW({"p": p}, weight_decay=0.01)
    ref = p0.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g
        opt.step(0.1)
        for i in range(3):
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mh, vh = m[i] / (1 - 0.9**t), v[i] / (1 - 0.999**t)
            ref[i] = ref[i] - 0.1 * 0.01 * ref[i] - 0.1 * mh / (vh**0.5 + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-14, atol=1e-15)


def test_weight_decay_is_decoupled():
    p = Tensor(np.array([2.0, -4.0]))
    p.grad = np.zeros(2)
    AdamW({"p": p}, weight_decay=0.5).step(0.1)
    np.testing.assert_array_equal(p.data, [2.0 * 0.95, -4.0 * 0.95])


@pytest.mark.parametrize(
    "kw", [{"batch_size": 0}, {"learning_rate": 0.0}, {"warmup_fraction": 1.0}, {"epochs": 0}, {"weight_decay": -1}]
)
def test_train_config_errors(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def _toy(n=32, seed=0):
    """Fields only: label is the sign of the first EBV coordinate, margin 1."""
    rng = make_rng(seed, "toy")
    y = np.arange(n) % 2
    ebv = rng.normal(size=(n, 4))
    ebv[:, 0] = np.where(y == 1, 1.0, -1.0) * (1.0 + rng.random(n))
    present = np.zeros((n, 5), dtype=bool)
    present[:, :2] = True
    return Cohort(
        sample_ids=np.arange(n), ebv=ebv, normal=rng.normal(size=(n, 19)),
        images=np.zeros((n, 3, 1, 8, 8)), present=present, labels=y,
        split=np.full(n, "train", dtype=object),
    )


def test_toy_reaches_low_loss(tiny_config):
    data = _toy()
    lr = LogisticRegression(C=1e4, max_iter=5000).fit(data.ebv, data.labels)
    p = lr.predict_proba(data.ebv)[:, 1]
    oracle_loss = -np.mean(data.labels * np.log(p) + (1 - data.labels) * np.log(1 - p))
    assert oracle_loss < 0.05
    tc = TrainConfig(batch_size=16, epochs=100, learning_rate=1e-2, seed=0)  # 200 steps
    _, hist = train(ImanModel(tiny_config), data, tc)
    assert len(hist) == 100 and hist[0]["val_auc"] is None
    assert hist[-1]["train_loss"] < 0.1


def test_training_is_deterministic(tiny_config, small_cohort):
    tc = TrainConfig(epochs=2, seed=3)
    m1, h1 = train(ImanModel(tiny_config), small_cohort, tc)
    m2, h2 = train(ImanModel(tiny_config), small_cohort, tc)
    assert h1 == h2
    for (k, a), b in zip(m1.named_parameters().items(), m2.named_parameters().values()):
        assert a.data.tobytes() == b.data.tobytes(), k
    assert predict_scores(m1, small_cohort).tobytes() == predict_scores(m2, small_cohort).tobytes()


def test_divergence_reports_step(tiny_config, small_cohort):
    m = ImanModel(tiny_config)
    m.head_bias.data[:] = np.nan
    with pytest.raises(TrainingError) as err:
        train(m, small_cohort, TrainConfig(epochs=1))
    assert err.value.step == 0


def test_parameters_finite_after_training(tiny_config, small_cohort):
    m, _ = train(ImanModel(tiny_config), small_cohort, TrainConfig(epochs=1))
    assert all(np.all(np.isfinite(p.data)) for p in m.named_parameters().values())


def test_history_csv(tmp_path):
    write_history_csv(tmp_path / "h.csv", [{"epoch": 1, "train_loss": 0.5, "val_auc": None}])
    assert (tmp_path / "h.csv").read_text() == "epoch,train_loss,val_auc\n1,0.5,undefined\n"


def test_scenario_overall():
    sc = Scenario.overall(0.4, allocation=(1, 0, 0.5, 0.5, 3))
    assert sc.name == "overall_40" and sc.rates == (0.4, 0.0, 0.2, 0.2, 1.0)
    with pytest.raises(ConfigurationError):
        Scenario("x", (0.1, 0.2))


@pytest.fixture(scope="module")
def sweep_setup():
    from iman.synthetic import SyntheticSpec, gen_synthetic

    base = gen_synthetic(SyntheticSpec(n_samples=60, image_shape=(1, 8, 8), seed=4))
    mc = ModelConfig(d_model=8, num_heads=2, num_layers=1, image_shape=(1, 8, 8), patch_size=4)
    return base, mc, TrainConfig(epochs=1)


def test_zero_rate_sweep_equals_plain_training(sweep_setup):
    base, mc, tc = sweep_setup
    (row,) = sweep_missing(base, [Scenario.overall(0.0)], [7], tc, mc)
    model, _ = train(ImanModel(dataclasses.replace(mc, seed=7)), base, dataclasses.replace(tc, seed=7))
    assert row["report"] == evaluate(model, base.split_subset("test"))


def test_duplicate_scenarios_and_workers(sweep_setup, tmp_path):
    base, mc, tc = sweep_setup
    sc = Scenario.overall(0.4)
    rows = sweep_missing(base, [sc, sc], [0, 1], tc, mc)
    assert [r["report"] for r in rows[:2]] == [r["report"] for r in rows[2:]]
    assert [(r["scenario"], r["seed"]) for r in rows] == [(sc.name, 0), (sc.name, 1)] * 2
    pooled = sweep_missing(base, [sc, sc], [0, 1], tc, mc, jobs=2)
    write_sweep_csv(tmp_path / "a.csv", rows)
    write_sweep_csv(tmp_path / "b.csv", pooled)
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert text.splitlines()[0] == ",".join(SWEEP_HEADER)
    assert text.splitlines()[0] == "scenario,seed,accuracy,f1,recall,precision,auc,train_minutes"


def test_degradation_summary():
    def row(name, auc):
        return {"scenario": name, "seed": 0, "report": EvalReport(1, 1, 1, 1, auc, 1, 0, 1, 0)}

    rows = [row("a", 0.9), row("a", 0.8), row("b", 0.86), row("c", 0.5)]
    s = degradation_summary(rows)
    assert s["mean_auc"]["a"] == pytest.approx(0.85)
    assert not s["monotone"]
    assert degradation_summary(rows, slack=0.02)["monotone"]
    assert not degradation_summary(rows, order=["c", "a"])["monotone"]
