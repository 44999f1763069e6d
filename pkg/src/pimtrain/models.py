"""Linear classifiers: logistic regression (BCE) and SVM (hinge).

A model's parameters are one flat vector ``[w_0 .. w_{d-1}, b]``.  In real
mode it is float64; in fixed mode it holds raw int64 values in ``fmt``.
Gradients use the same layout.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fixedpoint as fx
from .fixedpoint import DimensionError, FixedFormat, SigmoidLut

LOGISTIC = "logistic_bce"
HINGE = "hinge"
LOSSES = (LOGISTIC, HINGE)

PROB_EPS = 1e-7


class LabelConventionError(ValueError):
    pass


@dataclass(frozen=True)
class RegSpec:
    kind: str = "none"  # none | l1 | l2
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "l1", "l2"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.lam < 0:
            raise ValueError("regularization strength must be non-negative")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam > 0

    def penalty(self, w: np.ndarray) -> float:
        if not self.active:
            return 0.0
        if self.kind == "l2":
            return self.lam * 0.5 * float(np.dot(w, w))
        return self.lam * float(np.abs(w).sum())


NO_REG = RegSpec()


@dataclass(frozen=True, eq=False)
class LinearModel:
    params: np.ndarray
    fmt: FixedFormat | None = None

    @classmethod
    def zeros(cls, d: int, fmt: FixedFormat | None = None) -> "LinearModel":
        dtype = np.float64 if fmt is None else np.int64
        return cls(np.zeros(d + 1, dtype=dtype), fmt)

    @classmethod
    def from_parts(cls, weights, bias, fmt: FixedFormat | None = None) -> "LinearModel":
        dtype = np.float64 if fmt is None else np.int64
        return cls(np.append(np.asarray(weights, dtype=dtype), dtype(bias)), fmt)

    @property
    def d(self) -> int:
        return self.params.shape[0] - 1

    @property
    def weights(self) -> np.ndarray:
        return self.params[:-1]

    @property
    def bias(self):
        return self.params[-1]

    @property
    def is_fixed(self) -> bool:
        return self.fmt is not None

    def to_real(self) -> "LinearModel":
        if self.fmt is None:
            return self
        return LinearModel(fx.decode(self.params, self.fmt))

    def quantized(self, fmt: FixedFormat) -> "LinearModel":
        if self.fmt is not None:
            return LinearModel(fx.convert(self.params, self.fmt, fmt), fmt)
        return LinearModel(fx.encode(self.params, fmt), fmt)

    def with_params(self, params) -> "LinearModel":
        return LinearModel(params, self.fmt)

    def __eq__(self, other):
        return (isinstance(other, LinearModel) and self.fmt == other.fmt
                and np.array_equal(self.params, other.params))

    __hash__ = None


def check_labels(y, loss: str) -> np.ndarray:
    y = np.asarray(y)
    allowed = (0, 1) if loss == LOGISTIC else (-1, 1)
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if y.size and not np.isin(y, allowed).all():
        bad = y[~np.isin(y, allowed)][0]
        raise LabelConventionError(f"label {bad} outside {allowed} convention for {loss}")
    return y.astype(np.int64)


def _features(x):
    """Accept a matrix, a 1-D vector or a Dense/SparseSample-like object."""
    if hasattr(x, "indices") and hasattr(x, "values") and not sp.issparse(x):
        return x  # SparseSample, handled by caller
    if hasattr(x, "features"):
        return np.asarray(x.features)
    return x


def predict_margin(model: LinearModel, X):
    """``X @ w + b`` for a matrix (per-row result) or a single sample.

    Fixed mode expects raw features in the model's format and returns raw
    margins; the product is accumulated exactly and rounded once.
    """
    X = _features(X)
    if hasattr(X, "indices") and hasattr(X, "values") and not sp.issparse(X):
        if X.indices.size and X.indices.max() >= model.d:
            raise DimensionError(f"sparse index {X.indices.max()} outside d={model.d}")
        w = model.weights[X.indices]
        vals = np.asarray(X.values)
        if model.fmt is None:
            return float(np.dot(vals, w) + model.bias)
        acc = int(fx.exact_matmul(vals, w)) if vals.size else 0
        return fx.saturate(fx.shift_round(acc, model.fmt.frac_bits) + int(model.bias), "margin")
    single = not sp.issparse(X) and np.ndim(X) == 1
    if single:
        X = np.asarray(X)[None, :]
    if X.shape[1] != model.d:
        raise DimensionError(f"feature dimension {X.shape[1]} != model dimension {model.d}")
    if model.fmt is None:
        out = np.asarray(X @ model.weights).ravel() + model.bias
    else:
        acc = _exact_rows(X, model.weights)
        out = fx.saturate(fx.shift_round(acc, model.fmt.frac_bits) + int(model.bias), "margin")
    return out[0] if single else out


def _bound(a) -> int:
    if sp.issparse(a):
        a = a.data
    a = np.asarray(a)
    if a.size == 0:
        return 0
    return max(abs(int(a.max())), abs(int(a.min())))


def _exact_rows(X, w):
    """Exact integer ``X @ w``."""
    if sp.issparse(X):
        nnz_row = int(np.diff(X.indptr).max()) if X.shape[0] else 0
        if _bound(X) * _bound(w) * max(nnz_row, 1) < 1 << 63:
            return np.asarray(X @ w, dtype=np.int64).ravel()
        X = X.toarray()
    acc = fx.exact_matmul(X, w)
    return _as_int64_or_obj(acc)


def _exact_cols(X, v):
    """Exact integer ``v @ X``."""
    if sp.issparse(X):
        if _bound(X) * _bound(v) * max(X.shape[0], 1) < 1 << 63:
            return np.asarray(X.T @ v, dtype=np.int64).ravel()
        X = X.toarray()
    return _as_int64_or_obj(fx.exact_matmul(np.asarray(v), X))


def _as_int64_or_obj(acc):
    acc = np.asarray(acc)
    if acc.dtype != object:
        return acc
    if all(-(1 << 63) <= int(v) < (1 << 63) for v in acc.flat):
        return acc.astype(np.int64)
    return acc


def _real_view(model: LinearModel, X):
    if model.fmt is None:
        return model, X
    if sp.issparse(X):
        Xr = X.astype(np.float64) * model.fmt.step
    else:
        Xr = fx.decode(X, model.fmt)
    return model.to_real(), Xr


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = fx._sigmoid(np.atleast_1d(z))
    return out if z.ndim else float(out[0])


def lr_loss(model: LinearModel, X, y, reg: RegSpec = NO_REG) -> float:
    """Mean binary cross-entropy plus the weight penalty (bias excluded)."""
    y = check_labels(y, LOGISTIC)
    m, Xr = _real_view(model, X)
    p = np.clip(sigmoid(np.atleast_1d(predict_margin(m, Xr))), PROB_EPS, 1 - PROB_EPS)
    bce = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(bce.mean()) + reg.penalty(m.weights)


def hinge_loss(model: LinearModel, X, y, reg: RegSpec = NO_REG) -> float:
    y = check_labels(y, HINGE)
    m, Xr = _real_view(model, X)
    margins = np.atleast_1d(predict_margin(m, Xr))
    return float(np.maximum(0.0, 1.0 - y * margins).mean()) + reg.penalty(m.weights)


def loss_value(model: LinearModel, X, y, loss: str, reg: RegSpec = NO_REG) -> float:
    return lr_loss(model, X, y, reg) if loss == LOGISTIC else hinge_loss(model, X, y, reg)


def reg_gradient(model: LinearModel, reg: RegSpec):
    """Penalty gradient as a full parameter vector (bias entry is zero)."""
    g = np.zeros_like(model.params)
    if not reg.active:
        return g
    w = model.weights
    if model.fmt is None:
        g[:-1] = reg.lam * w if reg.kind == "l2" else reg.lam * np.sign(w)
        return g
    lam = fx.encode(reg.lam, model.fmt)
    if reg.kind == "l2":
        g[:-1] = fx.fixed_mul(lam, w, model.fmt)
    else:
        g[:-1] = lam * np.sign(w)
    return g


def add_grad(model: LinearModel, a, b):
    if model.fmt is None:
        return a + b
    return fx.fixed_add(a, b)


def data_gradient(model: LinearModel, X, y, loss: str, lut: SigmoidLut | None = None):
    """Batch-mean gradient of the unregularized loss, as a parameter vector."""
    y = check_labels(y, loss)
    b = len(y)
    if b == 0:
        raise ValueError("empty batch")
    margins = predict_margin(model, X)
    fmt = model.fmt
    if fmt is None:
        if loss == LOGISTIC:
            coef = sigmoid(margins) - y
        else:
            coef = np.where(y * margins < 1.0, -y, 0).astype(np.float64)
        g = np.empty_like(model.params)
        g[:-1] = np.asarray(X.T @ coef).ravel() / b
        g[-1] = coef.sum() / b
        return g

    if loss == LOGISTIC:
        lut = fx.default_lut() if lut is None else lut
        p = fx.sigmoid_lookup(lut, margins, fmt)
        p = fx.shift_round(np.asarray(p, dtype=np.int64), lut.fmt.frac_bits - fmt.frac_bits)
        coef = np.asarray(p - y * fmt.one, dtype=np.int64)
        # coef * x carries 2F fractional bits; one rounding back to F
        acc_w = _exact_cols(X, coef)
        gw = fx.div_round(acc_w, b * fmt.one)
        gb = fx.div_round(int(coef.sum()), b)
    else:
        active = y * np.asarray(margins, dtype=np.int64) < fmt.one
        coef = np.where(active, -y, 0).astype(np.int64)
        acc_w = _exact_cols(X, coef)
        gw = fx.div_round(acc_w, b)
        gb = fx.div_round(int(coef.sum()) * fmt.one, b)
    g = np.empty_like(model.params)
    g[:-1] = fx.saturate(gw, "grad")
    g[-1] = fx.saturate(gb, "grad")
    return g


def gradient(model: LinearModel, X, y, loss: str, reg: RegSpec = NO_REG,
             lut: SigmoidLut | None = None):
    """Data gradient plus penalty gradient, applied once for the batch."""
    g = data_gradient(model, X, y, loss, lut)
    if reg.active:
        g = add_grad(model, g, reg_gradient(model, reg))
    return g


def lr_gradient(model: LinearModel, X, y, reg: RegSpec = NO_REG, lut: SigmoidLut | None = None):
    """Returns ``(weight_gradient, bias_gradient)``."""
    g = gradient(model, X, y, LOGISTIC, reg, lut)
    return g[:-1], g[-1]


def svm_subgradient(model: LinearModel, X, y, reg: RegSpec = NO_REG):
    """Hinge subgradient; the zero branch is taken at ``y * margin == 1``."""
    g = gradient(model, X, y, HINGE, reg)
    return g[:-1], g[-1]
