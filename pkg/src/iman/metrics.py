"""Binary classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .exceptions import DimensionError, UndefinedMetricError

__all__ = ["EvalReport", "auc", "confusion_counts", "binary_report", "format_report"]

METRIC_NAMES = ("accuracy", "f1", "recall", "precision", "auc")


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    f1: float
    recall: float
    precision: float
    auc: Optional[float]  # None when only one class is present
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return asdict(self)


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores for {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_counts(scores, labels, threshold: float = 0.5):
    """``(tp, fp, tn, fn)`` with positive prediction ``score >= threshold``."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def binary_report(scores, labels, threshold: float = 0.5) -> EvalReport:
    s, y = _check(scores, labels)
    if s.size == 0:
        raise DimensionError("cannot evaluate an empty split")
    tp, fp, tn, fn = confusion_counts(s, y, threshold)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    try:
        area = auc(s, y)
    except UndefinedMetricError:
        area = None
    return EvalReport(
        accuracy=(tp + tn) / s.size,
        f1=f1,
        recall=recall,
        precision=precision,
        auc=area,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def format_report(report: EvalReport, title: str | None = None) -> str:
    lines = [title] if title else []
    for name in METRIC_NAMES:
        value = getattr(report, name)
        shown = "undefined" if value is None else f"{value:.4f}"
        lines.append(f"{name:<10} {shown:>9}")
    lines.append(f"{'tp/fp':<10} {report.tp:>4d}/{report.fp:<4d}")
    lines.append(f"{'tn/fn':<10} {report.tn:>4d}/{report.fn:<4d}")
    return "\n".join(lines)
