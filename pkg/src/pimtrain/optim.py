"""Per-worker SGD and the consensus-ADMM update rules (scaled dual form)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fixedpoint as fx
from .fixedpoint import ConfigurationError, SigmoidLut
from .models import NO_REG, LinearModel, RegSpec, gradient


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")


@dataclass(frozen=True)
class Prox:
    """Proximal pull ``rho * (x - z + u)`` toward the consensus model."""
    z: LinearModel
    u: np.ndarray
    rho: float


@dataclass
class AdmmState:
    z: LinearModel
    u: list[np.ndarray]
    rho: float = 1.0
    u_mean: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigurationError("ADMM penalty rho must be positive")
        if self.u_mean is None:
            self.u_mean = np.zeros_like(self.z.params)

    @classmethod
    def initial(cls, d: int, num_workers: int, rho: float = 1.0, fmt=None) -> "AdmmState":
        z = LinearModel.zeros(d, fmt)
        return cls(z, [np.zeros_like(z.params) for _ in range(num_workers)], rho)


def sgd_step(model: LinearModel, grad, lr) -> LinearModel:
    """``params - lr * grad``.  In fixed mode ``lr`` may be raw or real."""
    grad = np.asarray(grad)
    if model.fmt is None:
        return model.with_params(model.params - lr * grad)
    lr_raw = lr if isinstance(lr, (int, np.integer)) else fx.encode(lr, model.fmt)
    step = fx.fixed_mul(lr_raw, grad, model.fmt)
    return model.with_params(fx.fixed_sub(model.params, step))


def prox_gradient(model: LinearModel, prox: Prox):
    if model.fmt is None:
        return prox.rho * (model.params - prox.z.params + prox.u)
    diff = fx.fixed_add(fx.fixed_sub(model.params, prox.z.params), prox.u)
    return fx.fixed_mul(fx.encode(prox.rho, model.fmt), diff, model.fmt)


def iter_batches(start: int, stop: int, batch_size: int):
    """Full mini-batches of ``[start, stop)``; a trailing partial batch is dropped."""
    for lo in range(start, stop - batch_size + 1, batch_size):
        yield lo, lo + batch_size


def local_sgd_pass(model: LinearModel, X, y, cfg: SgdConfig, loss: str, reg: RegSpec = NO_REG,
                   prox: Prox | None = None, lut: SigmoidLut | None = None,
                   on_batch=None) -> LinearModel:
    """One sequential pass of mini-batch SGD over ``(X, y)``.

    ``on_batch(start, stop)`` is called after each processed batch, which the
    cluster simulator uses for traffic accounting.
    """
    n = X.shape[0]
    if n == 0 or n < cfg.batch_size:
        raise ConfigurationError(f"partition of {n} samples holds no full batch of {cfg.batch_size}")
    lr = cfg.learning_rate if model.fmt is None else fx.encode(cfg.learning_rate, model.fmt)
    for lo, hi in iter_batches(0, n, cfg.batch_size):
        g = gradient(model, X[lo:hi], y[lo:hi], loss, reg, lut)
        if prox is not None:
            pg = prox_gradient(model, prox)
            g = g + pg if model.fmt is None else fx.fixed_add(g, pg)
        model = sgd_step(model, g, lr)
        if on_batch is not None:
            on_batch(lo, hi)
    return model


def soft_threshold(v, kappa):
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def _z_update(x_mean: LinearModel, u_mean, lam: float, rho: float, num_workers: int, kind: str):
    if not rho > 0 or num_workers < 1:
        raise ConfigurationError("need rho > 0 and at least one worker")
    fmt = x_mean.fmt
    nrho = num_workers * rho
    if fmt is None:
        v = x_mean.params + np.asarray(u_mean, dtype=np.float64)
        z = v.copy()
        if kind == "l2":
            z[:-1] = (nrho / (lam + nrho)) * v[:-1]
        elif kind == "l1":
            z[:-1] = soft_threshold(v[:-1], lam / nrho)
        return x_mean.with_params(z)
    v = fx.fixed_add(x_mean.params, u_mean)
    z = v.copy()
    if kind == "l2":
        z[:-1] = fx.fixed_mul(fx.encode(nrho / (lam + nrho), fmt), v[:-1], fmt)
    elif kind == "l1":
        kappa = fx.encode(lam / nrho, fmt)
        w = v[:-1]
        z[:-1] = np.sign(w) * np.maximum(np.abs(w) - kappa, 0)
    return x_mean.with_params(z)


def admm_z_update_l2(x_mean: LinearModel, u_mean, lam: float, rho: float, num_workers: int) -> LinearModel:
    """Weights ``N rho / (lam + N rho) * (x_mean + u_mean)``; bias unshrunk."""
    return _z_update(x_mean, u_mean, lam, rho, num_workers, "l2")


def admm_z_update_l1(x_mean: LinearModel, u_mean, lam: float, rho: float, num_workers: int) -> LinearModel:
    """Weights soft-thresholded at ``lam / (N rho)``; bias unshrunk."""
    return _z_update(x_mean, u_mean, lam, rho, num_workers, "l1")


def admm_z_update(x_mean: LinearModel, u_mean, reg: RegSpec, rho: float, num_workers: int) -> LinearModel:
    kind = reg.kind if reg.active else "none"
    return _z_update(x_mean, u_mean, reg.lam, rho, num_workers, kind)


def admm_u_update(u, x: LinearModel, z: LinearModel):
    if x.fmt is None:
        return u + (x.params - z.params)
    return fx.fixed_add(u, fx.fixed_sub(x.params, z.params))
