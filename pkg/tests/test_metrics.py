import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimtrain import fixedpoint as fx
from pimtrain.fixedpoint import Q16_16
from pimtrain.metrics import UndefinedAUC, accuracy, auc_score, evaluate
from pimtrain.models import HINGE, LOGISTIC, LinearModel

from oracles import pairwise_auc


def test_auc_examples():
    assert auc_score([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc_score([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auc_score([1, 2, 3, 4], [1, 1, 0, 0]) == 0.0
    assert auc_score([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5
    assert auc_score([1, 2, 3], [-1, 1, -1]) == 0.5


def test_auc_single_class():
    with pytest.raises(UndefinedAUC):
        auc_score([1, 2, 3], [1, 1, 1])
    with pytest.raises(UndefinedAUC):
        auc_score([1, 2], [0, -1])


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(-6, 6), st.booleans()), min_size=2, max_size=60))
def test_auc_equals_pairwise_oracle(rows):
    scores = [s for s, _ in rows]
    labels = [int(l) for _, l in rows]
    if len(set(labels)) < 2:
        return
    assert auc_score(scores, labels) == float(pairwise_auc(scores, labels))


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(-1000, 1000), st.booleans()), min_size=2, max_size=40))
def test_auc_monotone_transform_and_complement(rows):
    scores = np.array([s for s, _ in rows], dtype=np.float64)
    labels = np.array([int(l) for _, l in rows])
    if labels.min() == labels.max():
        return
    base = auc_score(scores, labels)
    assert auc_score(scores ** 3 * 0.5 + 7, labels) == pytest.approx(base, abs=1e-12)
    assert auc_score(-scores, labels) == pytest.approx(1 - base, abs=1e-12)
    assert auc_score(scores, 1 - labels) == pytest.approx(1 - base, abs=1e-12)


def test_accuracy_counts_zero_as_positive():
    X = np.array([[1.0], [-1.0], [0.0], [2.0]])
    m = LinearModel.from_parts([1.0], 0.0)
    assert accuracy(m, X, np.array([1, 0, 1, 0])) == 0.75
    assert accuracy(m, X, np.array([1, -1, -1, 1]), HINGE) == 0.75


def test_evaluate_real_and_fixed_agree():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 4))
    y = rng.integers(0, 2, 200)
    m = LinearModel(rng.normal(size=5))
    r = evaluate(m, X, y, LOGISTIC)
    q = evaluate(m.quantized(Q16_16), fx.encode(X), y, LOGISTIC)
    assert r.n_test == q.n_test == 200
    assert abs(r.accuracy - q.accuracy) <= 0.01 and abs(r.auc - q.auc) <= 0.01
    assert r.mean_loss == pytest.approx(q.mean_loss, abs=1e-3)


def test_evaluate_single_class_has_no_auc():
    X = np.ones((3, 1))
    res = evaluate(LinearModel.zeros(1), X, np.array([1, 1, 1]), HINGE)
    assert res.auc is None and res.accuracy == 1.0 and res.mean_loss == 1.0
