"""Test-set metrics: accuracy, rank-based AUC and mean loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import LOGISTIC, LinearModel, loss_value, predict_margin


class UndefinedAUC(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    auc: float | None
    mean_loss: float
    n_test: int


def accuracy(model: LinearModel, X, y, loss: str = LOGISTIC) -> float:
    """Fraction classified correctly; a zero margin counts as the positive class."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("empty test set")
    margins = np.atleast_1d(predict_margin(model, X))
    pred_pos = margins >= 0
    return float(np.count_nonzero(pred_pos == (y > 0))) / y.size


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for ties.

    ``labels`` are binary; anything > 0 counts as positive.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    pos = np.asarray(labels).ravel() > 0
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUC("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # tie groups: boundaries where the sorted score changes
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size]
    # midrank of a group spanning 1-based ranks [s+1, e] is (s+1+e)/2; keep
    # doubled ranks as integers so the rank sum is exact
    doubled = np.repeat(starts + 1 + ends, ends - starts)
    ranks2 = np.empty(scores.size, dtype=np.int64)
    ranks2[order] = doubled
    r_pos2 = int(ranks2[pos].sum())
    u2 = r_pos2 - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def evaluate(model: LinearModel, X, y, loss: str) -> EvalResult:
    """Accuracy, AUC (None for single-class sets) and mean unregularized loss."""
    y = np.asarray(y)
    conv = np.where(y > 0, 1, 0 if loss == LOGISTIC else -1)
    margins = np.atleast_1d(predict_margin(model, X))
    try:
        auc = auc_score(margins, conv)
    except UndefinedAUC:
        auc = None
    return EvalResult(
        accuracy=float(np.count_nonzero((margins >= 0) == (conv > 0))) / conv.size,
        auc=auc,
        mean_loss=loss_value(model, X, conv, loss),
        n_test=int(conv.size),
    )
