import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from iman import ImanClassifier, MissingnessMasker
from iman.exceptions import ConstraintError, DimensionError

TINY = dict(d_model=8, num_heads=2, num_layers=1, patch_size=4, epochs=1)


def test_params_and_clone():
    clf = ImanClassifier(**TINY)
    assert clf.get_params()["d_model"] == 8
    c2 = clone(clf)
    assert c2.get_params() == clf.get_params()


def test_fit_predict(small_cohort):
    clf = ImanClassifier(**TINY).fit(small_cohort, small_cohort.labels, X_val=small_cohort)
    proba = clf.predict_proba(small_cohort)
    assert proba.shape == (len(small_cohort), 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    pred = clf.predict(small_cohort)
    assert set(pred) <= {0, 1}
    np.testing.assert_array_equal(pred, (proba[:, 1] >= 0.5).astype(int))
    assert len(clf.history_) == 1 and clf.history_[0]["val_auc"] is not None
    assert clf.evaluate(small_cohort).n == len(small_cohort)
    assert 0.0 <= clf.score(small_cohort, small_cohort.labels) <= 1.0


def test_pipeline_is_reproducible(small_cohort):
    def make():
        return Pipeline([("mask", MissingnessMasker(rates=(0.2, 0.1, 0.2, 0.2, 0.2))), ("clf", ImanClassifier(**TINY))])

    a = make().fit(small_cohort, small_cohort.labels)
    b = clone(make()).fit(small_cohort, small_cohort.labels)
    np.testing.assert_array_equal(a.decision_function(small_cohort), b.decision_function(small_cohort))
    table = a.named_steps["mask"].table_
    assert table.column_counts().tolist() == [8, 4, 8, 8, 8]


def test_mapping_input(small_cohort):
    cols = {"ebv": small_cohort.ebv, "normal": small_cohort.normal, "images": small_cohort.images}
    clf = ImanClassifier(**TINY).fit(cols, small_cohort.labels)
    assert clf.decision_function(cols).shape == (len(small_cohort),)


def test_input_validation(small_cohort):
    with pytest.raises(NotFittedError):
        ImanClassifier().predict(small_cohort)
    with pytest.raises(TypeError):
        ImanClassifier(**TINY).fit(np.zeros((3, 3)), [0, 1, 0])
    with pytest.raises(DimensionError):
        ImanClassifier(**TINY).fit(small_cohort, [0, 1])
    with pytest.raises(ValueError):
        ImanClassifier(**TINY).fit(small_cohort, np.full(len(small_cohort), 2))
    bad = small_cohort.with_columns(present=np.zeros_like(small_cohort.present))
    with pytest.raises(ConstraintError):
        ImanClassifier(**TINY).fit(bad)
    with pytest.raises(DimensionError):
        MissingnessMasker(rates=(0.1,)).fit(small_cohort)
