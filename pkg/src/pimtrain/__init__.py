"""Deterministic simulator for centralized distributed training of linear models
on processing-in-memory style workers (fixed-point arithmetic, table sigmoid,
parameter-server-only communication with byte accounting)."""

from .cluster import (ADMM, GA_SGD, MA_SGD, SERIAL, ClusterConfig, CommLedger, TrainReport,
                      ledger_formulas, run, run_admm, run_ga_sgd, run_ma_sgd, run_serial_sgd)
from .data import Dataset, generate_synthetic, load_libsvm, parse_libsvm
from .fixedpoint import FixedFormat, Q16_16
from .metrics import accuracy, auc_score, evaluate
from .models import HINGE, LOGISTIC, LinearModel, RegSpec
from .optim import SgdConfig

__version__ = "0.1.0"
