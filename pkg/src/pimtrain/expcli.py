"""Experiment sweeps driven by an INI config file, written out as CSV.

Config grammar (``configparser`` INI; ``;`` or ``#`` comments; lists are
comma-separated)::

    [experiment]
    name = dense_comparison        ; used for output file names
    seeds = 0, 1, 2
    breakdown = false               ; also write <name>_breakdown.csv

    [dataset]
    kind = synthetic                ; synthetic | synthetic_sparse | libsvm
    d = 16                          ; libsvm: optional override of 1 + max index
    n_train = 4096
    n_test = 1024
    mean_shift = 1.0                ; synthetic
    fields = 8                      ; synthetic_sparse: active features per row
    positive_rate = 0.25            ; synthetic_sparse
    path = train.svm                ; libsvm (optionally .gz)
    test_path = test.svm            ; libsvm, optional
    normalize = true                ; dense data only

    [model]
    kind = lr                       ; lr | svm

    [training]
    algorithms = ma_sgd, ga_sgd, admm   ; plus serial
    numeric = fixed                 ; real | fixed
    frac_bits = 16
    workers = 1, 4, 16
    batch_sizes = 16                ; per-worker batch for MA-SGD/ADMM/serial
    ga_batch_sizes = 256            ; optional global batch list for GA-SGD
    epochs = 10
    sync_period = 1                 ; integer | oneshot | per_epoch:<syncs>
    learning_rate = 0.05
    lambda = 1e-4
    regularizer = auto              ; auto | none | l1 | l2
    rho = 1.0
    admm_local_passes = 1
    payloads = ma_sgd:1/1, admm:1/1 ; optional up/down payload multipliers

    [scaling]
    mode = none                     ; none | weak | strong
    base_workers = 1                ; weak: n_train grows as N / base_workers

``regularizer = auto`` uses L2 everywhere except LR trained with ADMM,
which gets L1.  ``per_epoch:K`` picks the MA-SGD sync period so each worker
synchronizes K times per epoch (constant across N).

Rows are written in sweep order: algorithm, workers, batch size, seed,
epoch.  Line 1 is a ``# schema_version=N`` comment, line 2 the header.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import itertools
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import data as dmod
from .cluster import ADMM, ALGORITHMS, GA_SGD, MA_SGD, SERIAL, ClusterConfig, TrainReport, run
from .fixedpoint import FixedFormat
from .models import HINGE, LOGISTIC, RegSpec
from .optim import SgdConfig

SCHEMA_VERSION = 1
OUT_ENV = "PIMTRAIN_OUT"

COLUMNS = [
    "experiment", "dataset", "model", "algorithm", "numeric_mode", "frac_bits",
    "num_workers", "batch_size", "sync_period", "learning_rate", "lambda", "regularizer",
    "rho", "scaling", "n_train", "d", "seed", "epoch", "train_loss", "accuracy", "auc",
    "server_bytes_up", "server_bytes_down", "local_bytes", "sync_events", "overflow_count",
]

BREAKDOWN_COLUMNS = [
    "experiment", "model", "algorithm", "num_workers", "batch_size", "seed", "epochs",
    "server_bytes_per_epoch", "server_bytes_up_per_epoch", "server_bytes_down_per_epoch",
    "init_final_bytes", "local_bytes_per_epoch", "sync_events_per_epoch",
    "grad_samples_per_epoch", "model_updates_per_epoch",
]

EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, fieldname: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if fieldname is not None:
            where.append(fieldname)
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.fieldname = fieldname


class DatasetLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    d: int | None = None
    n_train: int = 4096
    n_test: int = 1024
    mean_shift: float = 1.0
    fields: int = 8
    positive_rate: float = 0.25
    path: str | None = None
    test_path: str | None = None
    normalize: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetSpec
    model: str
    algorithms: tuple[str, ...]
    numeric: str
    frac_bits: int
    workers: tuple[int, ...]
    batch_sizes: tuple[int, ...]
    ga_batch_sizes: tuple[int, ...] | None
    epochs: int
    sync_period: str
    learning_rate: float
    lam: float
    regularizer: str
    rho: float
    admm_local_passes: int
    payloads: dict = field(default_factory=dict)
    scaling: str = "none"
    base_workers: int = 1
    seeds: tuple[int, ...] = (0,)
    breakdown: bool = False

    @property
    def loss(self) -> str:
        return LOGISTIC if self.model == "lr" else HINGE

    @property
    def fmt(self) -> FixedFormat | None:
        return FixedFormat(self.frac_bits) if self.numeric == "fixed" else None


# ---------------------------------------------------------------------------
# parsing

class _Reader:
    def __init__(self, text: str, source: str):
        self.lines = text.splitlines()
        self.source = source
        self.cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
        try:
            self.cp.read_string(text, source=source)
        except configparser.DuplicateOptionError as e:
            raise ConfigError(f"duplicate key {e.option!r}", e.lineno, f"[{e.section}] {e.option}") from None
        except configparser.DuplicateSectionError as e:
            raise ConfigError(f"duplicate section {e.section!r}", e.lineno) from None
        except configparser.MissingSectionHeaderError as e:
            raise ConfigError("content before the first [section]", e.lineno) from None
        except configparser.ParsingError as e:
            lineno = e.errors[0][0] if e.errors else None
            raise ConfigError("cannot parse line", lineno) from None
        self.used: set[tuple[str, str]] = set()

    def line_of(self, section: str, key: str | None = None) -> int | None:
        current = None
        for i, raw in enumerate(self.lines, start=1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                current = s[1:-1].strip()
                if key is None and current == section:
                    return i
                continue
            if current == section and key is not None:
                k = s.split("=", 1)[0].split(":", 1)[0].strip().lower()
                if k == key:
                    return i
        return None

    def fail(self, section, key, message):
        raise ConfigError(message, self.line_of(section, key), f"[{section}] {key}")

    def raw(self, section, key, default=None, required=False):
        self.used.add((section, key))
        if self.cp.has_option(section, key):
            v = self.cp.get(section, key).strip()
            if v == "" and required:
                self.fail(section, key, "empty value")
            return v
        if required:
            raise ConfigError(f"missing required key {key!r}", self.line_of(section), f"[{section}] {key}")
        return default

    def convert(self, section, key, fn, default=None, required=False, what="value"):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            return fn(v)
        except (ValueError, TypeError):
            self.fail(section, key, f"invalid {what} {v!r}")

    def int(self, section, key, default=None, required=False, minimum=None):
        v = self.convert(section, key, int, default, required, "integer")
        if v is not None and minimum is not None and v < minimum:
            self.fail(section, key, f"must be >= {minimum}")
        return v

    def float(self, section, key, default=None, required=False):
        return self.convert(section, key, float, default, required, "number")

    def bool(self, section, key, default=False):
        v = self.raw(section, key)
        if v is None:
            return default
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        self.fail(section, key, f"invalid boolean {v!r}")

    def choice(self, section, key, options, default=None, required=False):
        v = self.raw(section, key, default, required)
        if v is not None and v not in options:
            self.fail(section, key, f"{v!r} not one of {', '.join(options)}")
        return v

    def list(self, section, key, fn, default=None, required=False, what="value"):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        items = [t.strip() for t in v.split(",") if t.strip()]
        if not items:
            self.fail(section, key, "empty list")
        out = []
        for t in items:
            try:
                out.append(fn(t))
            except (ValueError, TypeError):
                self.fail(section, key, f"invalid {what} {t!r}")
        return tuple(out)


KNOWN = {
    "experiment": {"name", "seeds", "breakdown"},
    "dataset": {"kind", "d", "n_train", "n_test", "mean_shift", "fields", "positive_rate",
                "path", "test_path", "normalize"},
    "model": {"kind"},
    "training": {"algorithms", "numeric", "frac_bits", "workers", "batch_sizes", "ga_batch_sizes",
                 "epochs", "sync_period", "learning_rate", "lambda", "regularizer", "rho",
                 "admm_local_passes", "payloads"},
    "scaling": {"mode", "base_workers"},
}


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> ExperimentConfig:
    r = _Reader(text, source)
    for section in r.cp.sections():
        if section not in KNOWN:
            raise ConfigError(f"unknown section [{section}]", r.line_of(section))
        for key in r.cp.options(section):
            if key not in KNOWN[section]:
                r.fail(section, key, "unknown key")
    for section in ("experiment", "dataset", "model", "training"):
        if not r.cp.has_section(section):
            raise ConfigError(f"missing section [{section}]")

    kind = r.choice("dataset", "kind", ("synthetic", "synthetic_sparse", "libsvm"), "synthetic")
    path = r.raw("dataset", "path")
    test_path = r.raw("dataset", "test_path")
    if kind == "libsvm" and not path:
        raise ConfigError("libsvm datasets need a path", r.line_of("dataset"), "[dataset] path")
    if base_dir is not None:
        path = str(base_dir / path) if path and not os.path.isabs(path) else path
        test_path = str(base_dir / test_path) if test_path and not os.path.isabs(test_path) else test_path
    ds = DatasetSpec(
        kind=kind,
        d=r.int("dataset", "d", None if kind == "libsvm" else 16, minimum=1),
        n_train=r.int("dataset", "n_train", 4096, minimum=2),
        n_test=r.int("dataset", "n_test", 1024, minimum=0),
        mean_shift=r.float("dataset", "mean_shift", 1.0),
        fields=r.int("dataset", "fields", 8, minimum=1),
        positive_rate=r.float("dataset", "positive_rate", 0.25),
        path=path,
        test_path=test_path,
        normalize=r.bool("dataset", "normalize", True),
    )
    if kind == "synthetic" and (ds.n_train % 2 or ds.n_test % 2):
        r.fail("dataset", "n_train", "synthetic sizes must be even")
    if kind == "synthetic_sparse" and not 0 < ds.positive_rate < 1:
        r.fail("dataset", "positive_rate", "must be in (0, 1)")

    algorithms = r.list("training", "algorithms", str, required=True, what="algorithm")
    for a in algorithms:
        if a not in ALGORITHMS:
            r.fail("training", "algorithms", f"unknown algorithm {a!r}")
    workers = r.list("training", "workers", int, (1,), what="integer")
    if any(w < 1 for w in workers):
        r.fail("training", "workers", "worker counts must be >= 1")
    batch_sizes = r.list("training", "batch_sizes", int, required=True, what="integer")
    ga_batch_sizes = r.list("training", "ga_batch_sizes", int, None, what="integer")
    for key, lst in (("batch_sizes", batch_sizes), ("ga_batch_sizes", ga_batch_sizes or ())):
        if any(b < 1 for b in lst):
            r.fail("training", key, "batch sizes must be >= 1")
    if GA_SGD in algorithms:
        for N in workers:
            for b in ga_batch_sizes or batch_sizes:
                if b % N:
                    r.fail("training", "ga_batch_sizes" if ga_batch_sizes else "batch_sizes",
                           f"GA-SGD batch {b} not divisible by {N} workers")

    sync = r.raw("training", "sync_period", "1")
    if not _valid_sync(sync):
        r.fail("training", "sync_period", f"invalid sync period {sync!r}")
    lr = r.float("training", "learning_rate", 0.05)
    if not lr > 0:
        r.fail("training", "learning_rate", "must be positive")
    lam = r.float("training", "lambda", 0.0)
    if lam < 0:
        r.fail("training", "lambda", "must be non-negative")
    rho = r.float("training", "rho", 1.0)
    if not rho > 0:
        r.fail("training", "rho", "must be positive")
    frac_bits = r.int("training", "frac_bits", 16)
    if not 0 <= frac_bits <= 30:
        r.fail("training", "frac_bits", "must be in [0, 30]")

    payloads = {}
    for item in r.list("training", "payloads", str, (), what="payload"):
        try:
            alg, ud = item.split(":")
            up, down = (int(v) for v in ud.split("/"))
            if alg not in ALGORITHMS or up < 0 or down < 0:
                raise ValueError
        except ValueError:
            r.fail("training", "payloads", f"invalid payload entry {item!r} (want alg:up/down)")
        payloads[alg] = (up, down)

    scaling = "none"
    base_workers = 1
    if r.cp.has_section("scaling"):
        scaling = r.choice("scaling", "mode", ("none", "weak", "strong"), "none")
        base_workers = r.int("scaling", "base_workers", min(workers), minimum=1)
        if scaling == "weak":
            if kind == "libsvm":
                r.fail("scaling", "mode", "weak scaling needs a synthetic dataset")
            for N in workers:
                if (ds.n_train * N) % base_workers:
                    r.fail("scaling", "base_workers", f"n_train * {N} not divisible by base_workers")

    return ExperimentConfig(
        name=r.raw("experiment", "name", "experiment"),
        dataset=ds,
        model=r.choice("model", "kind", ("lr", "svm"), required=True),
        algorithms=algorithms,
        numeric=r.choice("training", "numeric", ("real", "fixed"), "real"),
        frac_bits=frac_bits,
        workers=workers,
        batch_sizes=batch_sizes,
        ga_batch_sizes=ga_batch_sizes,
        epochs=r.int("training", "epochs", 10, minimum=0),
        sync_period=sync,
        learning_rate=lr,
        lam=lam,
        regularizer=r.choice("training", "regularizer", ("auto", "none", "l1", "l2"), "auto"),
        rho=rho,
        admm_local_passes=r.int("training", "admm_local_passes", 1, minimum=1),
        payloads=payloads,
        scaling=scaling,
        base_workers=base_workers,
        seeds=r.list("experiment", "seeds", int, (0,), what="integer"),
        breakdown=r.bool("experiment", "breakdown", False),
    )


def _valid_sync(v: str) -> bool:
    if v == "oneshot":
        return True
    if v.startswith("per_epoch:"):
        v = v.split(":", 1)[1]
    return v.isdigit() and int(v) >= 1


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    return parse_config(text, str(path), path.parent)


# ---------------------------------------------------------------------------
# sweep

@dataclass(frozen=True)
class SweepPoint:
    algorithm: str
    num_workers: int
    batch_size: int
    seed: int


def sweep_points(cfg: ExperimentConfig, seed_offset: int = 0) -> list[SweepPoint]:
    pts = []
    for alg in cfg.algorithms:
        batches = cfg.ga_batch_sizes if alg == GA_SGD and cfg.ga_batch_sizes else cfg.batch_sizes
        for N, b, seed in itertools.product(cfg.workers, batches, cfg.seeds):
            pts.append(SweepPoint(alg, N, b, seed + seed_offset))
    return pts


def regularizer_for(cfg: ExperimentConfig, algorithm: str) -> RegSpec:
    kind = cfg.regularizer
    if kind == "auto":
        kind = "l1" if algorithm == ADMM and cfg.model == "lr" else "l2"
    return RegSpec(kind, cfg.lam if kind != "none" else 0.0)


def sync_period_for(cfg: ExperimentConfig, n_train: int, N: int, b: int) -> int | None:
    v = cfg.sync_period
    if v == "oneshot":
        return None
    if v.startswith("per_epoch:"):
        syncs = int(v.split(":", 1)[1])
        batches = (n_train // N) // b
        return max(batches // syncs, 1)
    return int(v)


def build_datasets(cfg: ExperimentConfig, seed: int, num_workers: int):
    """Train and test sets for one sweep point."""
    spec = cfg.dataset
    n_train = spec.n_train
    if cfg.scaling == "weak":
        n_train = spec.n_train * num_workers // cfg.base_workers
        n_train += n_train % 2
    train_seed = dmod.derive_seed(seed, 1)
    test_seed = dmod.derive_seed(seed, 2)
    try:
        if spec.kind == "synthetic":
            train = dmod.generate_synthetic(spec.d, n_train, spec.mean_shift, train_seed)
            test = dmod.generate_synthetic(spec.d, spec.n_test, spec.mean_shift, test_seed) if spec.n_test else None
        elif spec.kind == "synthetic_sparse":
            # one draw split in two keeps train and test on the same hidden rule
            full = dmod.generate_synthetic_sparse(spec.d, n_train + spec.n_test, spec.fields, train_seed,
                                                  spec.positive_rate)
            train = full.slice(0, n_train)
            test = full.slice(n_train, full.n) if spec.n_test else None
        else:
            train = dmod.load_libsvm(spec.path, d=spec.d)
            test = dmod.load_libsvm(spec.test_path, d=train.d) if spec.test_path else None
    except (OSError, dmod.DataError) as e:
        raise DatasetLoadError(str(e)) from e
    if spec.normalize and train.layout == dmod.DENSE:
        stats = dmod.column_stats(train)
        train = dmod.normalize_columns(train, stats)
        if test is not None:
            test = dmod.normalize_columns(test, stats)
    return train, test


def run_point(cfg: ExperimentConfig, pt: SweepPoint) -> tuple[TrainReport, list[list]]:
    train, test = build_datasets(cfg, pt.seed, pt.num_workers)
    sync = sync_period_for(cfg, train.n, pt.num_workers, pt.batch_size)
    reg = regularizer_for(cfg, pt.algorithm)
    ccfg = ClusterConfig(
        algorithm=pt.algorithm,
        num_workers=pt.num_workers,
        sgd=SgdConfig(cfg.learning_rate, pt.batch_size, cfg.epochs),
        loss=cfg.loss,
        reg=reg,
        sync_period=sync,
        fmt=cfg.fmt,
        rho=cfg.rho,
        admm_local_passes=cfg.admm_local_passes,
        master_seed=pt.seed,
        payloads={**{a: (1, 1) for a in ALGORITHMS}, **cfg.payloads},
    )
    report = run(train, ccfg, test)
    rows = []
    for rec in report.epochs:
        t = rec.test
        rows.append([
            cfg.name, cfg.dataset.kind, cfg.model, pt.algorithm, cfg.numeric,
            cfg.frac_bits if cfg.numeric == "fixed" else "",
            pt.num_workers, pt.batch_size,
            "" if pt.algorithm != MA_SGD else ("oneshot" if sync is None else sync),
            repr(cfg.learning_rate), repr(reg.lam), reg.kind, repr(cfg.rho), cfg.scaling,
            train.n, train.d, pt.seed, rec.epoch, repr(rec.train_loss),
            "" if t is None else repr(t.accuracy),
            "" if t is None or t.auc is None else repr(t.auc),
            rec.ledger.server_bytes_up, rec.ledger.server_bytes_down, rec.ledger.local_bytes,
            rec.ledger.sync_events, rec.overflow_count,
        ])
    return report, rows


def breakdown_rows(name: str, model: str, reports: list[tuple[SweepPoint, TrainReport]]) -> list[list]:
    """Per-epoch traffic and operation counts of each finished run."""
    if not reports:
        raise ValueError("no reports to break down")
    rows = []
    for pt, rep in reports:
        E = max(len(rep.epochs), 1)
        body = rep.epochs[-1].ledger.minus(rep.ledger_after_init) if rep.epochs else \
            rep.ledger_after_init.minus(rep.ledger_after_init)
        init_final = rep.ledger.server_bytes - body.server_bytes
        rows.append([
            name, model, pt.algorithm, pt.num_workers, pt.batch_size, pt.seed, len(rep.epochs),
            body.server_bytes // E, body.server_bytes_up // E, body.server_bytes_down // E,
            init_final, body.local_bytes // E, body.sync_events // E,
            body.grad_samples // E, body.model_updates // E,
        ])
    return rows


def emit_breakdown(name: str, model: str, reports) -> str:
    return _csv_text(BREAKDOWN_COLUMNS, breakdown_rows(name, model, reports))


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# schema_version={SCHEMA_VERSION}\r\n")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike, threads: int = 1,
                   seed_offset: int = 0) -> list[Path]:
    """Run every sweep point and write the result CSV(s); returns their paths."""
    pts = sweep_points(cfg, seed_offset)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda p: run_point(cfg, p), pts))
    else:
        results = [run_point(cfg, p) for p in pts]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{cfg.name}.csv"]
    paths[0].write_bytes(_csv_text(COLUMNS, [row for _, rows in results for row in rows]).encode())
    if cfg.breakdown:
        p = out / f"{cfg.name}_breakdown.csv"
        p.write_bytes(emit_breakdown(cfg.name, cfg.model, [(pt, rep) for pt, (rep, _) in zip(pts, results)]).encode())
        paths.append(p)
    return paths


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pimtrain", description="Distributed-optimization PIM simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)
    rp = sub.add_parser("run", help="run an experiment config")
    rp.add_argument("config")
    rp.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or .)")
    rp.add_argument("--threads", type=int, default=1)
    rp.add_argument("--seed-offset", type=int, default=0)
    args = ap.parse_args(argv)

    out = args.out or os.environ.get(OUT_ENV) or "."
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"{args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = run_experiment(cfg, out, args.threads, args.seed_offset)
    except DatasetLoadError as e:
        print(f"dataset load failed: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # sizes that only fail once data is materialized (e.g. batch > partition)
        print(f"{args.config}: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
