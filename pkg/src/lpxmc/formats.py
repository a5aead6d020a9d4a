"""Emulated reduced-precision floating-point formats.

A format is an (exponent bits, mantissa bits) pair defining a finite,
symmetric grid of representable values inside float32. "Emulated" means
all arithmetic happens in float32 and values are snapped back onto the
grid after each producing operation, either by round-to-nearest-even or
by stochastic rounding.

Grid conventions:
  * IEEE-style: bias = 2^(E-1) - 1, the top exponent field is reserved,
    so max_finite = 2^bias * (2 - 2^-M).  Used for bf16, fp16, e5m2 and
    generic eXmY formats.
  * Extended-range (the e4m3 convention): no infinities, the top binade
    is representable except for its all-ones mantissa code, giving
    max_finite = 2^(bias+1) * (2 - 2^(1-M)) = 448 for e4m3.
Subnormals are always included, so the representable magnitude-exponent
range is [1 - bias - M, e_max]: [-9, 8] for e4m3 and [-16, 15] for e5m2.

Overflow saturates to the max finite magnitude; the grids carry no
infinity or NaN encodings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import re

import numpy as np

__all__ = [
    "FloatFormat",
    "QuantizedMatrix",
    "KahanState",
    "ExponentHistogram",
    "parse_format",
    "neighbors",
    "round_nearest",
    "round_stochastic",
    "kahan_add",
    "exponent_histogram",
    "FP32",
    "BF16",
    "FP16",
    "E4M3",
    "E5M2",
]


@dataclass(frozen=True)
class FloatFormat:
    """Descriptor of an emulated floating-point value grid."""

    exp_bits: int
    man_bits: int
    saturating: bool = True
    # None = auto: e4m3 gets the extended-range (no-inf) convention.
    extended_range: bool | None = field(default=None)

    def __post_init__(self):
        if not (2 <= self.exp_bits <= 8):
            raise ValueError(f"exp_bits must be in [2, 8], got {self.exp_bits}")
        if not (0 <= self.man_bits <= 23):
            raise ValueError(f"man_bits must be in [0, 23], got {self.man_bits}")
        if self.extended_range is None:
            object.__setattr__(
                self, "extended_range", (self.exp_bits, self.man_bits) == (4, 3)
            )

    @property
    def bias(self) -> int:
        return 2 ** (self.exp_bits - 1) - 1

    @property
    def min_normal_exp(self) -> int:
        return 1 - self.bias

    @property
    def max_exp(self) -> int:
        return self.bias + 1 if self.extended_range else self.bias

    @property
    def min_exp(self) -> int:
        """Exponent of the smallest positive (subnormal) grid value."""
        return self.min_normal_exp - self.man_bits

    @property
    def max_finite(self) -> float:
        if self.extended_range:
            if self.man_bits == 0:
                raise ValueError("extended range needs at least one mantissa bit")
            top_mantissa = 2.0 - 2.0 ** (1 - self.man_bits)
        else:
            top_mantissa = 2.0 - 2.0 ** (-self.man_bits)
        return float(np.ldexp(top_mantissa, self.max_exp))

    @property
    def min_subnormal(self) -> float:
        return float(np.ldexp(1.0, self.min_exp))

    @property
    def storage_bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def storage_bytes(self) -> int:
        return max(1, -(-self.storage_bits // 8))

    @property
    def name(self) -> str:
        named = {(8, 23): "fp32", (8, 7): "bf16", (5, 10): "fp16",
                 (4, 3): "e4m3", (5, 2): "e5m2"}
        return named.get((self.exp_bits, self.man_bits),
                         f"e{self.exp_bits}m{self.man_bits}")

    @property
    def is_working_precision(self) -> bool:
        """True when the grid coincides with native float32."""
        return self.exp_bits == 8 and self.man_bits == 23

    def grid_values(self) -> np.ndarray:
        """Exhaustive sorted enumeration of the grid (small formats only)."""
        if self.exp_bits > 6 or self.man_bits > 8:
            raise ValueError("grid enumeration is only for small formats")
        vals = [0.0]
        # subnormals
        for j in range(1, 2 ** self.man_bits):
            vals.append(np.ldexp(j / 2.0 ** self.man_bits, self.min_normal_exp))
        # normals
        for e in range(self.min_normal_exp, self.max_exp + 1):
            top = 2 ** self.man_bits
            if self.extended_range and e == self.max_exp:
                top -= 1  # all-ones mantissa is reserved in the top binade
            for j in range(top):
                vals.append(np.ldexp(1.0 + j / 2.0 ** self.man_bits, e))
        pos = np.array(sorted(vals))
        return np.concatenate([-pos[:0:-1], pos])


FP32 = FloatFormat(8, 23)
BF16 = FloatFormat(8, 7)
FP16 = FloatFormat(5, 10)
E4M3 = FloatFormat(4, 3)
E5M2 = FloatFormat(5, 2)

_NAMED = {"fp32": FP32, "bf16": BF16, "fp16": FP16, "e4m3": E4M3, "e5m2": E5M2}


def parse_format(name: str) -> FloatFormat:
    """Parse "fp32", "bf16", "fp16", "e4m3", "e5m2" or generic "eXmY"."""
    key = name.strip().lower()
    if key in _NAMED:
        return _NAMED[key]
    m = re.fullmatch(r"e(\d+)m(\d+)", key)
    if m is None:
        raise ValueError(f"unknown float format {name!r}")
    return FloatFormat(int(m.group(1)), int(m.group(2)))


def _check_finite(x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to rounding operation")


def _ulp_of(fmt: FloatFormat, x: np.ndarray) -> np.ndarray:
    """Grid spacing at the binade of each |x| (float64, exact)."""
    _, e = np.frexp(x)
    exp = np.clip(e - 1, fmt.min_normal_exp, fmt.max_exp)
    return np.ldexp(1.0, exp - fmt.man_bits)


def _saturate(fmt: FloatFormat, q: np.ndarray, x: np.ndarray) -> np.ndarray:
    over = np.abs(q) > fmt.max_finite
    if np.any(over):
        if not fmt.saturating:
            raise OverflowError("value outside representable range of non-saturating format")
        q = np.where(over, np.copysign(fmt.max_finite, x), q)
    return q


def neighbors(fmt: FloatFormat, x) -> tuple[np.ndarray, np.ndarray]:
    """Bracketing grid values (lo <= x <= hi); both saturate past max_finite."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    ulp = _ulp_of(fmt, x)
    f = x / ulp
    lo = np.floor(f) * ulp
    hi = np.ceil(f) * ulp
    lo = _saturate(fmt, lo, x)
    hi = _saturate(fmt, hi, x)
    # past the saturation bound both neighbors collapse onto it
    clipped = np.abs(x) > fmt.max_finite
    lo = np.where(clipped, np.copysign(fmt.max_finite, x), lo)
    hi = np.where(clipped, np.copysign(fmt.max_finite, x), hi)
    return np.float32(lo), np.float32(hi)


def round_nearest(fmt: FloatFormat, x) -> np.ndarray:
    """Snap to the nearest grid value, ties to even mantissa."""
    scalar = np.isscalar(x) or (isinstance(x, np.ndarray) and x.ndim == 0)
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    ulp = _ulp_of(fmt, x)
    q = np.round(x / ulp) * ulp  # np.round is half-to-even
    q = _saturate(fmt, q, x)
    q32 = np.float32(q)
    return q32 if not scalar else np.float32(q32)


def round_stochastic(fmt: FloatFormat, x, rng, step: int, tensor_id: int, index) -> np.ndarray:
    """Round to a bracketing grid value with probability given by proximity.

    The uniform draw for each element is a pure function of
    (rng.seed, step, tensor_id, index), so the result is reproducible
    independent of chunking or evaluation order.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = neighbors(fmt, x)
    lo64 = lo.astype(np.float64)
    hi64 = hi.astype(np.float64)
    width = hi64 - lo64
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(width > 0.0, (x - lo64) / width, 0.0)
    u = rng.uniform(step, tensor_id, index)
    u = np.broadcast_to(np.asarray(u), x.shape)
    return np.where(u < p, hi, lo).astype(np.float32)


@dataclass
class KahanState:
    """Running sum constrained to a grid plus a compensation term.

    ``comp`` carries the negated rounding residual of the last add; the
    pair (sum + comp) tracks the exact sum far more closely than the
    grid-rounded ``sum`` alone.
    """

    sum: np.ndarray
    comp: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "KahanState":
        return cls(np.zeros(shape, dtype=np.float32),
                   np.zeros(shape, dtype=np.float32))


def kahan_add(state: KahanState, v, fmt: FloatFormat) -> KahanState:
    """Compensated add of v onto the grid-constrained running sum.

    Three-line update: y = v - c; c = ((s + y) - s) - y; s = s + y, where
    the new s is re-quantized onto the grid by round-to-nearest.  When the
    grid is native float32 the compensation is skipped entirely (plain
    add), so the update degenerates to an ordinary += .
    """
    v = np.asarray(v, dtype=np.float32)
    _check_finite(v)
    s = np.asarray(state.sum, dtype=np.float32)
    c = np.asarray(state.comp, dtype=np.float32)
    if fmt.is_working_precision:
        return KahanState(s + v, c)
    y = v - c
    t = round_nearest(fmt, s + y)
    c_new = (t - s) - y
    return KahanState(t, c_new)


@dataclass
class ExponentHistogram:
    """Classification of value magnitudes against a format's exponent range."""

    underflow_fraction: float
    in_range_fraction: float
    overflow_fraction: float
    counts: dict[int, int]
    zero_count: int
    all_zero: bool

    def fractions(self) -> tuple[float, float, float]:
        return (self.underflow_fraction, self.in_range_fraction,
                self.overflow_fraction)


def exponent_histogram(values, fmt: FloatFormat) -> ExponentHistogram:
    """Histogram of base-2 exponents vs the representable range of fmt.

    Zeros are counted separately; the under/in/over fractions are over the
    nonzero values and sum to 1 (all zero -> ``all_zero`` flag, fractions 0).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    _check_finite(v)
    nz = v[v != 0.0]
    if nz.size == 0:
        return ExponentHistogram(0.0, 0.0, 0.0, {}, int(v.size), True)
    _, e = np.frexp(nz)
    exps = e - 1
    uniq, cnt = np.unique(exps, return_counts=True)
    counts = {int(k): int(c) for k, c in zip(uniq, cnt)}
    n = nz.size
    under = int(np.count_nonzero(exps < fmt.min_exp))
    over = int(np.count_nonzero(exps > fmt.max_exp))
    return ExponentHistogram(
        under / n, (n - under - over) / n, over / n,
        counts, int(v.size - n), False,
    )


@dataclass
class QuantizedMatrix:
    """Dense matrix whose entries live on a format grid, stored as float32."""

    values: np.ndarray
    fmt: FloatFormat

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)

    @classmethod
    def quantize(cls, values, fmt: FloatFormat) -> "QuantizedMatrix":
        return cls(round_nearest(fmt, values), fmt)

    @property
    def shape(self):
        return self.values.shape

    def check_on_grid(self):
        snapped = round_nearest(self.fmt, self.values)
        if not np.array_equal(snapped, self.values):
            raise ValueError("matrix entries have drifted off the format grid")
