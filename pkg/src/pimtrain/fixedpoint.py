"""32-bit two's-complement fixed-point arithmetic and a table-driven sigmoid.

Raw values are plain Python ints or ``np.int64`` arrays holding the 32-bit
pattern as a signed integer.  The format (number of fractional bits) is not
stored with the values; callers pass it along.

Every operation saturates instead of wrapping.  Saturation events are counted
by the :class:`OverflowCounter` active in the current context (see
:func:`track_overflow`); when none is active they are silently ignored.
"""
from __future__ import annotations

import contextlib
import contextvars
import functools
import math
import threading
from dataclasses import dataclass, field

import numpy as np

RAW_MIN = -(1 << 31)
RAW_MAX = (1 << 31) - 1
_INT64_LIMIT = 1 << 63


class ConfigurationError(ValueError):
    """Invalid parameters for a format, table or partition."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class FixedFormat:
    frac_bits: int = 16

    def __post_init__(self):
        if not 0 <= self.frac_bits <= 30:
            raise ConfigurationError(f"frac_bits must be in [0, 30], got {self.frac_bits}")

    @property
    def one(self) -> int:
        return 1 << self.frac_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return RAW_MIN * self.step

    @property
    def max_value(self) -> float:
        return RAW_MAX * self.step

    def __str__(self):
        return f"Q{32 - self.frac_bits}.{self.frac_bits}"


Q16_16 = FixedFormat(16)
Q1_30 = FixedFormat(30)


@dataclass
class OverflowCounter:
    count: int = 0
    by_op: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, op: str, n: int):
        if n:
            with self._lock:
                self.count += n
                self.by_op[op] = self.by_op.get(op, 0) + n


_active_counter: contextvars.ContextVar[OverflowCounter | None] = contextvars.ContextVar(
    "pimtrain_overflow_counter", default=None)


@contextlib.contextmanager
def track_overflow(counter: OverflowCounter | None = None):
    """Count saturation events raised inside the ``with`` block."""
    counter = OverflowCounter() if counter is None else counter
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _record(op: str, n: int):
    counter = _active_counter.get()
    if counter is not None:
        counter.add(op, int(n))


def _is_scalar(x) -> bool:
    return np.ndim(x) == 0


def saturate(v, op: str = "saturate"):
    """Clamp integer(s) to the 32-bit range, counting clamped elements."""
    if _is_scalar(v):
        v = int(v)
        if v > RAW_MAX:
            _record(op, 1)
            return RAW_MAX
        if v < RAW_MIN:
            _record(op, 1)
            return RAW_MIN
        return v
    arr = np.asarray(v)
    if arr.dtype == object:
        over = sum(1 for e in arr.flat if e > RAW_MAX or e < RAW_MIN)
        _record(op, over)
        return np.array([min(max(int(e), RAW_MIN), RAW_MAX) for e in arr.flat],
                        dtype=np.int64).reshape(arr.shape)
    over = np.count_nonzero((arr > RAW_MAX) | (arr < RAW_MIN))
    if over:
        _record(op, over)
        arr = np.clip(arr, RAW_MIN, RAW_MAX)
    return arr.astype(np.int64, copy=False)


def encode(x, fmt: FixedFormat = Q16_16):
    """Real value(s) to raw fixed point, round-half-even, saturating."""
    scaled = np.rint(np.asarray(x, dtype=np.float64) * float(fmt.one))
    if _is_scalar(x):
        s = float(scaled)
        if s > RAW_MAX:
            _record("encode", 1)
            return RAW_MAX
        if s < RAW_MIN:
            _record("encode", 1)
            return RAW_MIN
        return int(s)
    over = np.count_nonzero((scaled > RAW_MAX) | (scaled < RAW_MIN))
    if over:
        _record("encode", over)
        scaled = np.clip(scaled, RAW_MIN, RAW_MAX)
    return scaled.astype(np.int64)


def decode(raw, fmt: FixedFormat = Q16_16):
    if _is_scalar(raw):
        return int(raw) * fmt.step
    return np.asarray(raw, dtype=np.float64) * fmt.step


def shift_round(v, shift: int):
    """Arithmetic right shift with round-half-even; ``v`` may exceed 32 bits."""
    if shift <= 0:
        return v << -shift if _is_scalar(v) else np.left_shift(v, -shift)
    half = 1 << (shift - 1)
    mask = (1 << shift) - 1
    if _is_scalar(v):
        v = int(v)
        q, r = v >> shift, v & mask
        if r > half or (r == half and q & 1):
            q += 1
        return q
    v = np.asarray(v)
    if v.dtype == object:
        return np.array([shift_round(int(e), shift) for e in v.flat], dtype=object).reshape(v.shape)
    q = v >> shift
    r = v & mask
    return q + ((r > half) | ((r == half) & (q & 1 == 1)))


def div_round(num, den: int):
    """Integer division rounded to nearest, ties to even.  ``den`` > 0."""
    if _is_scalar(num):
        q, r = divmod(int(num), den)
        if 2 * r > den or (2 * r == den and q & 1):
            q += 1
        return q
    num = np.asarray(num)
    if num.dtype == object:
        return np.array([div_round(int(e), den) for e in num.flat], dtype=object).reshape(num.shape)
    q, r = np.divmod(num, den)
    return q + ((2 * r > den) | ((2 * r == den) & (q & 1 == 1)))


def fixed_add(a, b):
    return saturate(_widen(a) + _widen(b), "add")


def fixed_sub(a, b):
    return saturate(_widen(a) - _widen(b), "sub")


def _widen(a):
    return int(a) if _is_scalar(a) else np.asarray(a, dtype=np.int64)


def fixed_mul(a, b, fmt: FixedFormat = Q16_16):
    # 32x32 -> at most 62 magnitude bits, so int64 holds the full product
    prod = _widen(a) * _widen(b)
    return saturate(shift_round(prod, fmt.frac_bits), "mul")


def exact_matmul(a, b):
    """Integer matrix/vector product without int64 wraparound.

    Falls back to arbitrary-precision Python integers when the worst-case
    accumulated magnitude could exceed 63 bits.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    inner = a.shape[-1] if a.ndim else 1
    bound = _max_abs(a) * _max_abs(b) * max(inner, 1)
    if bound < _INT64_LIMIT:
        return a @ b
    return a.astype(object) @ b.astype(object)


def _max_abs(a) -> int:
    if a.size == 0:
        return 0
    return max(abs(int(a.max())), abs(int(a.min())))


def fixed_dot(a, b, fmt: FixedFormat = Q16_16) -> int:
    """Dot product with one rounding and one saturation at the end."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"fixed_dot needs equal-length vectors, got {a.shape} and {b.shape}")
    acc = int(exact_matmul(a, b)) if a.size else 0
    return saturate(shift_round(acc, fmt.frac_bits), "dot")


def convert(raw, src: FixedFormat, dst: FixedFormat):
    """Re-express raw values of one format in another (rounding, saturating)."""
    shift = src.frac_bits - dst.frac_bits
    return saturate(shift_round(_widen(raw), shift), "convert")


# ---------------------------------------------------------------------------
# sigmoid table

@dataclass(frozen=True, eq=False)
class SigmoidLut:
    entries: np.ndarray
    lo: float
    hi: float
    count: int
    fmt: FixedFormat

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.count

    @property
    def nbytes(self) -> int:
        return 4 * self.count


def build_sigmoid_lut(lo: float = -16.0, hi: float = 16.0, count: int = 1 << 20,
                      fmt: FixedFormat = Q1_30) -> SigmoidLut:
    """Tabulate sigmoid at ``lo + i * step`` for ``i < count``.

    The table has its own output format.  Q1.30 is the default because table
    values live in [0, 1]; a Q16.16 table adds up to 2**-17 of output
    rounding on top of the indexing error.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
        raise ConfigurationError(f"invalid LUT range [{lo}, {hi})")
    if count < 2 or count & (count - 1):
        raise ConfigurationError(f"LUT count must be a power of two >= 2, got {count}")
    step = (hi - lo) / count
    xs = lo + np.arange(count, dtype=np.float64) * step
    entries = encode(_sigmoid(xs), fmt)
    entries.setflags(write=False)
    return SigmoidLut(entries, float(lo), float(hi), int(count), fmt)


@functools.lru_cache(maxsize=8)
def default_lut(lo: float = -16.0, hi: float = 16.0, count: int = 1 << 20,
                frac_bits: int = 30) -> SigmoidLut:
    return build_sigmoid_lut(lo, hi, count, FixedFormat(frac_bits))


def _sigmoid(x):
    # split branches keep exp() from overflowing for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def lut_index(lut: SigmoidLut, raw, in_fmt: FixedFormat = Q16_16):
    x = np.asarray(raw, dtype=np.float64) * in_fmt.step
    x = np.clip(x, lut.lo, lut.hi - lut.step)
    idx = np.rint((x - lut.lo) / lut.step).astype(np.int64)
    return np.clip(idx, 0, lut.count - 1)


def sigmoid_lookup(lut: SigmoidLut, raw, in_fmt: FixedFormat = Q16_16):
    """Nearest-entry sigmoid of raw input(s) in ``in_fmt``.

    The result is in the table's format (``lut.fmt``).
    """
    idx = lut_index(lut, raw, in_fmt)
    out = lut.entries[idx]
    return int(out) if _is_scalar(raw) else out
