"""scikit-learn compatible wrappers.

``X`` is a :class:`~iman.data.Cohort` (or a mapping with the same column
names).  Both estimators compose in a :class:`sklearn.pipeline.Pipeline`::

    Pipeline([("mask", MissingnessMasker(rates=(0.2, 0, 0, 0, 0))),
              ("clf", ImanClassifier(epochs=10))]).fit(cohort, cohort.labels)
"""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import IMAGE_MODALITIES, MODALITIES, Cohort
from .exceptions import ConstraintError, DimensionError
from .metrics import EvalReport, binary_report
from .missingness import build_table, mask_cohort
from .model import ImanModel, ModelConfig
from .numerics import make_rng
from .training import TrainConfig, predict_scores, train

__all__ = ["check_cohort", "ImanClassifier", "MissingnessMasker"]

_COLUMNS = ("sample_ids", "ebv", "normal", "images", "present", "labels", "split")


def check_cohort(X, y=None, *, require_labels: bool = False) -> Cohort:
    """Validate and coerce ``X`` into a :class:`Cohort`.

    Mappings are accepted with the cohort column names; ``sample_ids``,
    ``present``, ``labels`` and ``split`` may be omitted.  A ``y`` argument
    overrides the cohort's labels.
    """
    if isinstance(X, Mapping):
        cols = dict(X)
        unknown = set(cols) - set(_COLUMNS)
        if unknown:
            raise DimensionError(f"unknown cohort columns: {sorted(unknown)}")
        n = len(cols["ebv"])
        cols.setdefault("sample_ids", np.arange(n))
        cols.setdefault("present", np.ones((n, len(MODALITIES)), dtype=bool))
        cols.setdefault("labels", np.zeros(n, dtype=np.int64) if y is None else y)
        X = Cohort(**cols)
    elif not isinstance(X, Cohort):
        raise TypeError(f"expected a Cohort or mapping of columns, got {type(X).__name__}")
    if len(X) == 0:
        raise DimensionError("cohort is empty")
    for name in ("ebv", "normal", "images"):
        if not np.all(np.isfinite(getattr(X, name))):
            raise ValueError(f"cohort column {name!r} contains non-finite values")
    if not X.present.any(axis=1).all():
        raise ConstraintError("every sample needs at least one present modality")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise DimensionError(f"y has shape {y.shape}, expected ({len(X)},)")
        X = X.with_columns(labels=y.astype(np.int64))
    if require_labels and np.any((X.labels != 0) & (X.labels != 1)):
        raise ValueError("labels must be 0 or 1")
    return X


class ImanClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier over multi-modal cohorts with missing modalities."""

    def __init__(
        self,
        d_model=64,
        num_heads=4,
        num_layers=2,
        prompt_len=2,
        prompt_layers=1,
        cafa_num_param=5,
        cafa_stride=1,
        patch_size=8,
        mlp_ratio=2,
        pooling="mean",
        missing_mode="prompt",
        batch_size=16,
        learning_rate=1e-3,
        weight_decay=0.01,
        epochs=30,
        warmup_fraction=0.1,
        threshold=0.5,
        random_state=0,
    ):
        self.d_model = d_model
        self.num_heads = num_heads
        self.num_layers = num_layers
        self.prompt_len = prompt_len
        self.prompt_layers = prompt_layers
        self.cafa_num_param = cafa_num_param
        self.cafa_stride = cafa_stride
        self.patch_size = patch_size
        self.mlp_ratio = mlp_ratio
        self.pooling = pooling
        self.missing_mode = missing_mode
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.warmup_fraction = warmup_fraction
        self.threshold = threshold
        self.random_state = random_state

    def _model_config(self, X: Cohort) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            prompt_len=self.prompt_len,
            prompt_layers=self.prompt_layers,
            cafa_num_param=self.cafa_num_param,
            cafa_stride=self.cafa_stride,
            patch_size=self.patch_size,
            image_shape=X.image_shape,
            field_dims=X.field_dims,
            mlp_ratio=self.mlp_ratio,
            pooling=self.pooling,
            missing_mode=self.missing_mode,
            seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            warmup_fraction=self.warmup_fraction,
            seed=self.random_state,
        )

    def fit(self, X, y=None, X_val=None):
        """Train on every row of ``X``; ``X_val`` (optional) feeds per-epoch validation AUC."""
        X = check_cohort(X, y, require_labels=True)
        parts = [X.with_columns(split=np.full(len(X), "train", dtype=object))]
        if X_val is not None:
            V = check_cohort(X_val, require_labels=True)
            parts.append(V.with_columns(split=np.full(len(V), "val", dtype=object)))
        data = parts[0] if len(parts) == 1 else _concat(parts)
        self.model_ = ImanModel(self._model_config(X))
        self.model_, self.history_ = train(self.model_, data, self._train_config())
        self.classes_ = np.array([0, 1])
        self.n_parameters_ = self.model_.parameter_count()
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.predict_logits(check_cohort(X))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = predict_scores(self.model_, check_cohort(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(np.int64)

    def evaluate(self, X, y=None) -> EvalReport:
        X = check_cohort(X, y, require_labels=True)
        return binary_report(self.predict_proba(X)[:, 1], X.labels, self.threshold)


def _concat(parts) -> Cohort:
    return Cohort(**{c: np.concatenate([getattr(p, c) for p in parts]) for c in _COLUMNS})


class MissingnessMasker(TransformerMixin, BaseEstimator):
    """Masks a cohort with a random missingness table.

    ``rates`` gives one missing rate per modality (``ebv, normal, t1, t1c,
    t2``).  The table depends only on ``random_state``, ``rates`` and the
    number of rows, so repeated calls are reproducible.
    """

    def __init__(self, rates=(0.0, 0.0, 0.0, 0.0, 0.0), random_state=0):
        self.rates = rates
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_cohort(X)
        rates = np.asarray(self.rates, dtype=float)
        if rates.shape != (len(MODALITIES),):
            raise DimensionError(f"rates needs {len(MODALITIES)} entries, got {rates.shape}")
        self.n_modalities_ = len(MODALITIES)
        self.image_modalities_ = IMAGE_MODALITIES
        return self

    def transform(self, X):
        check_is_fitted(self, "n_modalities_")
        X = check_cohort(X)
        self.table_ = build_table(len(X), self.rates, make_rng(self.random_state, "mask"))
        return mask_cohort(X, self.table_)
