"""Optimization loop, evaluation, and missing-rate sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MODALITIES, Cohort
from .exceptions import ConfigurationError, DimensionError, TrainingError
from .metrics import EvalReport, binary_report
from .missingness import build_table, mask_cohort
from .model import ImanModel, ModelConfig, bce_loss
from .numerics import _stable_sigmoid, make_rng

__all__ = [
    "TrainConfig",
    "AdamW",
    "lr_at",
    "train",
    "evaluate",
    "predict_scores",
    "Scenario",
    "sweep_missing",
    "write_sweep_csv",
    "write_history_csv",
    "degradation_summary",
    "SWEEP_HEADER",
]

log = logging.getLogger(__name__)

SWEEP_HEADER = ("scenario", "seed", "accuracy", "f1", "recall", "precision", "auc", "train_minutes")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 30
    warmup_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be positive and weight_decay nonnegative")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Batch 64, lr 1e-4, weight decay 0.01, 200 epochs, 10% warmup."""
        base = dict(batch_size=64, learning_rate=1e-4, weight_decay=0.01, epochs=200, warmup_fraction=0.10)
        base.update(overrides)
        return cls(**base)


def lr_at(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``peak`` then linear decay to 0 at ``total_steps``."""
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return peak * step / warmup
    if total_steps <= warmup:
        return peak
    return peak * max(0.0, (total_steps - step) / (total_steps - warmup))


class AdamW:
    """Adam with decoupled weight decay (``p -= lr * wd * p`` before the Adam step)."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            data = p.data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def predict_scores(model: ImanModel, cohort: Cohort, batch_size: int = 64) -> np.ndarray:
    return _stable_sigmoid(model.predict_logits(cohort, batch_size))


def evaluate(model: ImanModel, split: Cohort, threshold: float = 0.5) -> EvalReport:
    if len(split) == 0:
        raise DimensionError("cannot evaluate an empty split")
    return binary_report(predict_scores(model, split), split.labels, threshold)


def train(model: ImanModel, dataset: Cohort, tc: TrainConfig, progress=None):
    """Fit ``model`` on the ``train`` split of ``dataset``.

    Returns ``(model, history)``; ``history`` holds one dict per epoch with
    ``train_loss`` (mean over batches) and ``val_auc`` (``None`` when the
    validation split is empty or single-class).
    """
    train_set = dataset.split_subset("train")
    val_set = dataset.split_subset("val")
    n = len(train_set)
    if n == 0:
        raise DimensionError("dataset has no training samples")
    params = model.named_parameters()
    model.set_requires_grad(True)
    opt = AdamW(params, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total = steps_per_epoch * tc.epochs
    rng = make_rng(tc.seed, "shuffle")
    history = []
    step = 0
    for epoch in range(tc.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, tc.batch_size):
            batch = train_set.subset(order[start : start + tc.batch_size])
            model.zero_grad()
            loss = bce_loss(model.forward_cohort(batch), batch.labels).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step}", step)
            loss.backward()
            opt.step(lr_at(step, total, tc.learning_rate, tc.warmup_fraction))
            losses.append(value)
            step += 1
        val_auc = None
        if len(val_set):
            val_auc = evaluate(model, val_set).auc
        record = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_auc": val_auc}
        history.append(record)
        log.info("epoch %d loss %.4f val_auc %s", epoch + 1, record["train_loss"], val_auc)
        if progress is not None:
            progress(record)
    model.zero_grad()
    model.set_requires_grad(False)
    return model, history


def write_history_csv(path, history) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_auc"))
        for rec in history:
            auc = "undefined" if rec["val_auc"] is None else repr(float(rec["val_auc"]))
            w.writerow((rec["epoch"], repr(float(rec["train_loss"])), auc))


# -- sweeps -----------------------------------------------------------------
@dataclass(frozen=True)
class Scenario:
    name: str
    rates: tuple  # one missing rate per modality, MODALITIES order

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if len(self.rates) != len(MODALITIES):
            raise ConfigurationError(f"scenario {self.name!r} needs {len(MODALITIES)} rates")

    @classmethod
    def overall(cls, rate: float, allocation=None, name: str | None = None) -> "Scenario":
        """Per-modality rates ``rate * allocation`` (allocation defaults to all ones)."""
        alloc = np.ones(len(MODALITIES)) if allocation is None else np.asarray(allocation, dtype=float)
        return cls(name or f"overall_{int(round(rate * 100))}", tuple(np.clip(rate * alloc, 0.0, 1.0)))


def _run_cell(base: Cohort, scenario: Scenario, seed: int, tc: TrainConfig, mc: ModelConfig, record_time: bool):
    table = build_table(len(base), scenario.rates, make_rng(seed, "mask"))
    masked = mask_cohort(base, table)
    model = ImanModel(dataclasses.replace(mc, seed=seed))
    t0 = time.perf_counter()
    train(model, masked, dataclasses.replace(tc, seed=seed))
    minutes = (time.perf_counter() - t0) / 60.0 if record_time else None
    report = evaluate(model, masked.split_subset("test"))
    return {"scenario": scenario.name, "seed": seed, "report": report, "train_minutes": minutes}


def _run_cell_packed(args):
    return _run_cell(*args)


def sweep_missing(
    base_dataset: Cohort,
    scenarios,
    seeds,
    tc: TrainConfig,
    model_config: ModelConfig | None = None,
    jobs: int = 1,
    record_time: bool = False,
) -> list:
    """Train and test one model per (scenario, seed).

    The mask for a cell depends only on the seed and the scenario's rates, so
    duplicated scenarios reproduce identical rows.  Rows come back in
    scenario-major order regardless of ``jobs``.
    """
    mc = model_config or ModelConfig()
    cells = [(base_dataset, sc, int(seed), tc, mc, record_time) for sc in scenarios for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_packed, cells))
    return [_run_cell(*c) for c in cells]


def _fmt(v) -> str:
    if v is None:
        return "undefined"
    return repr(float(v))


def write_sweep_csv(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for row in rows:
            r = row["report"]
            minutes = "" if row["train_minutes"] is None else f"{row['train_minutes']:.3f}"
            w.writerow(
                (row["scenario"], row["seed"], _fmt(r.accuracy), _fmt(r.f1), _fmt(r.recall),
                 _fmt(r.precision), _fmt(r.auc), minutes)
            )


def degradation_summary(rows, order=None, slack: float = 0.0) -> dict:
    """Seed-averaged test AUC per scenario and whether it is non-increasing
    (within ``slack``) along ``order`` (default: first-seen scenario order)."""
    names = list(order) if order is not None else list(dict.fromkeys(r["scenario"] for r in rows))
    means = {}
    for name in names:
        vals = [r["report"].auc for r in rows if r["scenario"] == name and r["report"].auc is not None]
        means[name] = float(np.mean(vals)) if vals else None
    seq = [means[n] for n in names]
    monotone = all(
        a is not None and b is not None and b <= a + slack for a, b in zip(seq, seq[1:])
    )
    return {"mean_auc": means, "order": names, "monotone": monotone}
