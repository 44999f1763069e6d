"""Parameter-server simulator for MA-SGD, GA-SGD, consensus ADMM and serial SGD.

The host statically shuffles and partitions the training set, sends the
initial model to every worker, then alternates worker phases (local mini-batch
SGD or shard gradients) with a serialized synchronization phase that
aggregates in ascending worker order.  All worker<->server transfers and
worker-local streams are counted in a :class:`CommLedger`; nothing is timed.

Per-epoch server traffic, with P = 4 * (d + 1) bytes per model payload,
``n_w = n // N`` samples per worker and ``B = n // b``:

* serial: 0
* ma_sgd: N * P * (up + down) * ceil((n_w // b) / sync_period)
* ga_sgd: N * P * (up + down) * B
* admm:   N * P * (up + down)

``up``/``down`` are the per-algorithm payload multipliers (default 1 each).
The initial broadcast and final collection add 2 * P * N once per run.
"""
from __future__ import annotations

import contextvars
import hashlib
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fixedpoint as fx
from .data import Dataset, partition_batch_shards, partition_contiguous, quantize, shuffle
from .fixedpoint import ConfigurationError, FixedFormat, OverflowCounter, SigmoidLut
from .metrics import EvalResult, evaluate
from .models import LOGISTIC, LOSSES, NO_REG, LinearModel, RegSpec, data_gradient, gradient, loss_value, reg_gradient
from .optim import (AdmmState, Prox, SgdConfig, admm_u_update, admm_z_update, iter_batches,
                    local_sgd_pass, sgd_step)

SERIAL = "serial"
MA_SGD = "ma_sgd"
GA_SGD = "ga_sgd"
ADMM = "admm"
ALGORITHMS = (SERIAL, MA_SGD, GA_SGD, ADMM)

WORD_BYTES = 4


def _default_payloads():
    return {alg: (1, 1) for alg in ALGORITHMS}


@dataclass(frozen=True)
class ClusterConfig:
    algorithm: str = GA_SGD
    num_workers: int = 1
    sgd: SgdConfig = field(default_factory=SgdConfig)
    loss: str = LOGISTIC
    reg: RegSpec = NO_REG
    # batches per worker between MA-SGD averagings; None = one-shot
    sync_period: int | None = 1
    fmt: FixedFormat | None = None
    rho: float = 1.0
    admm_local_passes: int = 1
    master_seed: int = 0
    shuffle: bool = True
    payloads: dict = field(default_factory=_default_payloads)
    lut: SigmoidLut | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if self.num_workers < 1:
            raise ConfigurationError("need at least one worker")
        if self.sync_period is not None and (self.sync_period < 1 or not _is_intlike(self.sync_period)):
            raise ConfigurationError("sync_period must be a positive integer or None (one-shot)")
        if self.algorithm == GA_SGD and self.sgd.batch_size % self.num_workers:
            raise ConfigurationError(
                f"GA-SGD batch size {self.sgd.batch_size} not divisible by {self.num_workers} workers")
        if self.algorithm == ADMM and not self.rho > 0:
            raise ConfigurationError("ADMM needs rho > 0")
        if self.admm_local_passes < 1:
            raise ConfigurationError("admm_local_passes must be >= 1")

    @property
    def workers(self) -> int:
        return 1 if self.algorithm == SERIAL else self.num_workers

    def payload(self, alg: str | None = None) -> tuple[int, int]:
        return tuple(self.payloads.get(alg or self.algorithm, (1, 1)))


def _is_intlike(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


@dataclass
class CommLedger:
    payload_bytes: int
    server_bytes_up: int = 0
    server_bytes_down: int = 0
    local_bytes: int = 0
    sync_events: int = 0
    grad_samples: int = 0
    model_updates: int = 0

    @property
    def server_bytes(self) -> int:
        return self.server_bytes_up + self.server_bytes_down

    def upload(self, workers: int, mult: int = 1):
        self.server_bytes_up += workers * mult * self.payload_bytes

    def download(self, workers: int, mult: int = 1):
        self.server_bytes_down += workers * mult * self.payload_bytes

    def add_work(self, work: "WorkerWork"):
        self.local_bytes += work.local_bytes
        self.grad_samples += work.grad_samples
        self.model_updates += work.model_updates

    def snapshot(self) -> "CommLedger":
        return replace(self)

    def minus(self, other: "CommLedger") -> "CommLedger":
        return CommLedger(self.payload_bytes,
                          self.server_bytes_up - other.server_bytes_up,
                          self.server_bytes_down - other.server_bytes_down,
                          self.local_bytes - other.local_bytes,
                          self.sync_events - other.sync_events,
                          self.grad_samples - other.grad_samples,
                          self.model_updates - other.model_updates)


@dataclass
class WorkerWork:
    local_bytes: int = 0
    grad_samples: int = 0
    model_updates: int = 0


@dataclass
class EpochRecord:
    epoch: int
    model: LinearModel
    train_loss: float
    test: EvalResult | None
    ledger: CommLedger
    overflow_count: int = 0


@dataclass
class TrainReport:
    config: ClusterConfig
    initial_model: LinearModel
    final_model: LinearModel
    epochs: list[EpochRecord]
    ledger: CommLedger
    ledger_after_init: CommLedger
    overflow: OverflowCounter
    n_train: int
    dropped: int
    wall_time: float = 0.0

    def epoch_server_bytes(self, epoch: int) -> tuple[int, int]:
        """Server (up, down) bytes spent during 1-based ``epoch``."""
        prev = self.ledger_after_init if epoch == 1 else self.epochs[epoch - 2].ledger
        diff = self.epochs[epoch - 1].ledger.minus(prev)
        return diff.server_bytes_up, diff.server_bytes_down

    def fingerprint(self) -> str:
        """Digest of everything except wall time."""
        h = hashlib.sha256()
        for m in [self.initial_model, self.final_model] + [e.model for e in self.epochs]:
            h.update(np.ascontiguousarray(m.params).tobytes())
        for e in self.epochs:
            h.update(struct.pack("<d", e.train_loss))
            if e.test is not None:
                h.update(struct.pack("<dd", e.test.accuracy, e.test.mean_loss))
                h.update(struct.pack("<d", -1.0 if e.test.auc is None else e.test.auc))
            h.update(repr(_ledger_tuple(e.ledger)).encode())
        h.update(repr(_ledger_tuple(self.ledger)).encode())
        h.update(repr((self.overflow.count, sorted(self.overflow.by_op.items()))).encode())
        return h.hexdigest()


def _ledger_tuple(l: CommLedger):
    return (l.payload_bytes, l.server_bytes_up, l.server_bytes_down, l.local_bytes,
            l.sync_events, l.grad_samples, l.model_updates)


# ---------------------------------------------------------------------------
# closed forms

@dataclass(frozen=True)
class EpochTraffic:
    up: int
    down: int
    syncs: int

    @property
    def total(self) -> int:
        return self.up + self.down


def syncs_per_epoch(algorithm: str, n: int, batch_size: int, num_workers: int,
                    sync_period: int | None = 1) -> int:
    if algorithm == SERIAL:
        return 0
    if algorithm == GA_SGD:
        return n // batch_size
    if algorithm == ADMM:
        return 1
    batches = (n // num_workers) // batch_size
    if sync_period is None:
        return 1 if batches else 0
    return -(-batches // sync_period)


def ledger_formulas(cfg: ClusterConfig, n: int, d: int) -> dict[str, EpochTraffic]:
    """Predicted per-epoch server traffic of every algorithm under ``cfg``'s sizes.

    ``n`` is the training-set size after shuffling (before partitioning).
    """
    P = WORD_BYTES * (d + 1)
    out = {}
    for alg in ALGORITHMS:
        N = 1 if alg == SERIAL else cfg.num_workers
        syncs = syncs_per_epoch(alg, n, cfg.sgd.batch_size, N, cfg.sync_period)
        up, down = cfg.payload(alg)
        out[alg] = EpochTraffic(N * P * up * syncs, N * P * down * syncs, syncs)
    return out


# ---------------------------------------------------------------------------
# simulation

class _Lanes:
    """Runs per-worker tasks, optionally on a thread pool; results keep worker order."""

    def __init__(self, lanes: int):
        self.pool = ThreadPoolExecutor(lanes) if lanes > 1 else None

    def map(self, fn, items):
        if self.pool is None:
            return [fn(it) for it in items]
        futures = [self.pool.submit(contextvars.copy_context().run, fn, it) for it in items]
        return [f.result() for f in futures]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _mean_params(models_params: list[np.ndarray], fmt: FixedFormat | None) -> np.ndarray:
    """Coordinate-wise mean, accumulated in ascending worker order."""
    n = len(models_params)
    if fmt is None:
        acc = np.zeros(models_params[0].shape, dtype=np.longdouble)
        for p in models_params:
            acc += p
        return (acc / n).astype(np.float64)
    acc = np.zeros(models_params[0].shape, dtype=np.int64)
    for p in models_params:
        acc += p
    return fx.saturate(fx.div_round(acc, n), "average")


class _Run:
    def __init__(self, train: Dataset, test: Dataset | None, cfg: ClusterConfig,
                 initial: LinearModel | None, lanes: int):
        self.cfg = cfg
        self.counter = OverflowCounter()
        self._token = fx._active_counter.set(self.counter)
        if train.is_fixed:
            raise ConfigurationError("pass real-mode data; the run quantizes it per config")
        self.train_real = shuffle(train, cfg.master_seed) if cfg.shuffle else train
        ds = self.train_real if cfg.fmt is None else quantize(self.train_real, cfg.fmt)
        self.ds = ds
        self.X = ds.X
        self.y = ds.labels_for(cfg.loss)
        self.y_real = self.train_real.labels_for(cfg.loss)
        self.test = test
        self.d = ds.d
        self.P = WORD_BYTES * (self.d + 1)
        self.ledger = CommLedger(self.P)
        if initial is None:
            initial = LinearModel.zeros(self.d, cfg.fmt)
        elif cfg.fmt is not None and initial.fmt is None:
            initial = initial.quantized(cfg.fmt)
        self.initial = initial
        self.lut = cfg.lut
        if cfg.fmt is not None and cfg.loss == LOGISTIC and self.lut is None:
            self.lut = fx.default_lut()
        self.lanes = _Lanes(lanes)
        self.records: list[EpochRecord] = []
        self.lr = cfg.sgd.learning_rate if cfg.fmt is None else fx.encode(cfg.sgd.learning_rate, cfg.fmt)

    def close(self):
        self.lanes.close()
        fx._active_counter.reset(self._token)

    def batch_work(self, lo: int, hi: int, work: WorkerWork):
        work.local_bytes += self.ds.batch_bytes(lo, hi) + 2 * self.P
        work.grad_samples += hi - lo
        work.model_updates += 1

    def broadcast_initial(self):
        self.ledger.download(self.cfg.workers)
        self.after_init = self.ledger.snapshot()

    def collect_final(self):
        self.ledger.upload(self.cfg.workers)

    def sync(self, up: bool = True, down: bool = True):
        mu, md = self.cfg.payload()
        N = self.cfg.workers
        if up:
            self.ledger.upload(N, mu)
        if down:
            self.ledger.download(N, md)
        self.ledger.sync_events += 1

    def end_epoch(self, epoch: int, model: LinearModel):
        real = model.to_real()
        train_loss = loss_value(real, self.train_real.X, self.y_real, self.cfg.loss, self.cfg.reg)
        test = None
        if self.test is not None:
            test = evaluate(real, self.test.X, self.test.y, self.cfg.loss)
        self.records.append(EpochRecord(epoch, model, train_loss, test, self.ledger.snapshot(),
                                        self.counter.count))

    def report(self, final: LinearModel, t0: float) -> TrainReport:
        self.collect_final()
        return TrainReport(self.cfg, self.initial, final, self.records, self.ledger.snapshot(),
                           self.after_init, self.counter, self.ds.n, 0, time.perf_counter() - t0)

    # worker-side primitives -------------------------------------------------

    def add(self, a, b):
        return a + b if self.cfg.fmt is None else fx.fixed_add(a, b)


def _run(train, test, cfg, initial, lanes, body):
    t0 = time.perf_counter()
    run = _Run(train, test, cfg, initial, lanes)
    try:
        run.broadcast_initial()
        final, dropped = body(run)
        rep = run.report(final, t0)
        rep.dropped = dropped
        return rep
    finally:
        run.close()


def run_serial_sgd(train: Dataset, cfg: ClusterConfig, test: Dataset | None = None,
                   initial: LinearModel | None = None, lanes: int = 1) -> TrainReport:
    """Plain mini-batch SGD over the shuffled data; the reference trajectory."""
    cfg = replace(cfg, algorithm=SERIAL) if cfg.algorithm != SERIAL else cfg

    def body(run: _Run):
        b = cfg.sgd.batch_size
        if b > run.ds.n:
            raise ConfigurationError(f"batch size {b} exceeds {run.ds.n} samples")
        model = run.initial
        for epoch in range(1, cfg.sgd.epochs + 1):
            work = WorkerWork()
            for lo, hi in iter_batches(0, run.ds.n, b):
                g = gradient(model, run.X[lo:hi], run.y[lo:hi], cfg.loss, cfg.reg, run.lut)
                model = sgd_step(model, g, run.lr)
                run.batch_work(lo, hi, work)
            run.ledger.add_work(work)
            run.end_epoch(epoch, model)
        return model, run.ds.n % b

    return _run(train, test, cfg, initial, lanes, body)


def run_ma_sgd(train: Dataset, cfg: ClusterConfig, test: Dataset | None = None,
               initial: LinearModel | None = None, lanes: int = 1) -> TrainReport:
    """Local SGD on contiguous partitions with periodic model averaging."""

    def body(run: _Run):
        N, b = cfg.num_workers, cfg.sgd.batch_size
        plan = partition_contiguous(run.ds.n, N, b)
        per = plan.assignments[0][1] - plan.assignments[0][0]
        nb = per // b
        if nb == 0:
            raise ConfigurationError(f"{per} samples per worker hold no batch of {b}")
        period = nb if cfg.sync_period is None else cfg.sync_period
        rounds = -(-nb // period)
        global_model = run.initial
        locals_ = [global_model] * N

        def worker(args):
            k, model, first, last = args
            start = plan.assignments[k][0]
            work = WorkerWork()
            for j in range(first, last):
                lo, hi = start + j * b, start + (j + 1) * b
                g = gradient(model, run.X[lo:hi], run.y[lo:hi], cfg.loss, cfg.reg, run.lut)
                model = sgd_step(model, g, run.lr)
                run.batch_work(lo, hi, work)
            return model, work

        for epoch in range(1, cfg.sgd.epochs + 1):
            for r in range(rounds):
                first, last = r * period, min((r + 1) * period, nb)
                results = run.lanes.map(worker, [(k, locals_[k], first, last) for k in range(N)])
                for _, work in results:
                    run.ledger.add_work(work)
                avg = _mean_params([m.params for m, _ in results], cfg.fmt)
                global_model = global_model.with_params(avg)
                locals_ = [global_model] * N
                run.sync()
            run.end_epoch(epoch, global_model)
        return global_model, plan.dropped + N * (per - nb * b)

    return _run(train, test, cfg, initial, lanes, body)


def run_ga_sgd(train: Dataset, cfg: ClusterConfig, test: Dataset | None = None,
               initial: LinearModel | None = None, lanes: int = 1) -> TrainReport:
    """Each global batch is split across workers; the server averages shard gradients.

    Workers send data-loss gradients; the server adds the penalty gradient
    once before the update.
    """

    def body(run: _Run):
        N, b = cfg.num_workers, cfg.sgd.batch_size
        plan = partition_batch_shards(run.ds.n, N, b)
        model = run.initial

        def worker(args):
            model, (lo, hi) = args
            g = data_gradient(model, run.X[lo:hi], run.y[lo:hi], cfg.loss, run.lut)
            work = WorkerWork(run.ds.batch_bytes(lo, hi) + 2 * run.P, hi - lo, 0)
            return g, work

        for epoch in range(1, cfg.sgd.epochs + 1):
            for shards in plan.assignments:
                results = run.lanes.map(worker, [(model, s) for s in shards])
                for _, work in results:
                    run.ledger.add_work(work)
                g = _mean_params([g for g, _ in results], cfg.fmt)
                if cfg.reg.active:
                    g = run.add(g, reg_gradient(model, cfg.reg))
                model = sgd_step(model, g, run.lr)
                run.ledger.model_updates += 1
                run.sync()
            run.end_epoch(epoch, model)
        return model, plan.dropped

    return _run(train, test, cfg, initial, lanes, body)


def run_admm(train: Dataset, cfg: ClusterConfig, test: Dataset | None = None,
             initial: LinearModel | None = None, lanes: int = 1) -> TrainReport:
    """Consensus ADMM; one synchronization per global epoch.

    The x-update is ``admm_local_passes`` SGD passes over the worker's whole
    partition on the data loss plus the proximal pull.  The penalty enters
    only through the z-update.  Workers keep their duals; the server tracks
    the dual mean via ``u_mean += x_mean - z``.
    """

    def body(run: _Run):
        N, b = cfg.num_workers, cfg.sgd.batch_size
        plan = partition_contiguous(run.ds.n, N, b)
        per = plan.assignments[0][1] - plan.assignments[0][0]
        if per < b:
            raise ConfigurationError(f"{per} samples per worker hold no batch of {b}")
        state = AdmmState(run.initial, [np.zeros_like(run.initial.params) for _ in range(N)], cfg.rho)
        xs = [run.initial] * N

        def worker(k):
            lo, hi = plan.assignments[k]
            work = WorkerWork()
            prox = Prox(state.z, state.u[k], cfg.rho)
            x = xs[k]
            for _ in range(cfg.admm_local_passes):
                x = local_sgd_pass(x, run.X[lo:hi], run.y[lo:hi], cfg.sgd, cfg.loss, NO_REG, prox,
                                   run.lut, on_batch=lambda a, c: run.batch_work(lo + a, lo + c, work))
            return x, work

        for epoch in range(1, cfg.sgd.epochs + 1):
            results = run.lanes.map(worker, range(N))
            for _, work in results:
                run.ledger.add_work(work)
            xs = [x for x, _ in results]
            x_mean = run.initial.with_params(_mean_params([x.params for x in xs], cfg.fmt))
            z = admm_z_update(x_mean, state.u_mean, cfg.reg, cfg.rho, N)
            state.u_mean = run.add(state.u_mean, _diff(x_mean.params, z.params, cfg.fmt))
            state.z = z
            state.u = [admm_u_update(state.u[k], xs[k], z) for k in range(N)]
            run.sync()
            run.end_epoch(epoch, z)
        run.admm_state = state
        return state.z, plan.dropped + N * (per % b)

    return _run(train, test, cfg, initial, lanes, body)


def _diff(a, b, fmt):
    return a - b if fmt is None else fx.fixed_sub(a, b)


RUNNERS = {SERIAL: run_serial_sgd, MA_SGD: run_ma_sgd, GA_SGD: run_ga_sgd, ADMM: run_admm}


def run(train: Dataset, cfg: ClusterConfig, test: Dataset | None = None,
        initial: LinearModel | None = None, lanes: int = 1) -> TrainReport:
    return RUNNERS[cfg.algorithm](train, cfg, test, initial, lanes)
