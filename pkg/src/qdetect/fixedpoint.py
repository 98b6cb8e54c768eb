"""Bit-exact emulation of signed fixed-point arithmetic.

A value is stored as an integer ``code`` with real value ``code * 2**-F`` for
a format with ``F`` fraction bits.  The default format is 16 total bits with
an 8-bit fraction field: one sign bit, seven integer bits, eight fraction
bits, covering [-128, 127.99609375].

Semantics implemented here and relied on by the quantized models:

* quantize: round-to-nearest-even on the code grid, then saturate.
* add: integer add with saturation.
* mul: exact double-width product, one round-and-saturate back to the format.
* mac/matmul: all products accumulated exactly in 64-bit integers at double
  scale, then a single terminal round-and-saturate per output element.  This
  makes accumulation order irrelevant, so results are permutation invariant.

A ``truncate`` rounding mode (floor on the code grid) exists for sensitivity
studies; everything defaults to round-to-nearest-even.

All helpers operate elementwise on numpy arrays of codes (int64) and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError

__all__ = [
    "FixedFormat",
    "quantize",
    "to_real",
    "saturate",
    "rne_shift_right",
    "add",
    "mul",
    "mac_accumulate",
    "fixed_matmul",
    "ensure_integer_codes",
]


@dataclass(frozen=True)
class FixedFormat:
    """Signed fixed-point format: ``total_bits`` wide, ``fraction_bits`` fractional."""

    total_bits: int = 16
    fraction_bits: int = 8

    def __post_init__(self):
        if not (1 <= self.fraction_bits < self.total_bits <= 64):
            raise ConfigurationError(
                f"invalid fixed format {self.total_bits}.{self.fraction_bits}: "
                "need 1 <= fraction_bits < total_bits <= 64"
            )

    @property
    def integer_bits(self) -> int:
        return self.total_bits - self.fraction_bits

    @property
    def scale(self) -> int:
        return 1 << self.fraction_bits

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def max_code(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def min_value(self) -> float:
        return self.min_code / self.scale

    @property
    def max_value(self) -> float:
        return self.max_code / self.scale

    @classmethod
    def parse(cls, descriptor: str) -> "FixedFormat":
        """Parse a ``"T.F"`` descriptor such as ``"16.8"``."""
        try:
            total_s, frac_s = descriptor.strip().split(".")
            return cls(int(total_s), int(frac_s))
        except ValueError as exc:
            raise ConfigurationError(
                f"bad fixed-format descriptor {descriptor!r}; expected 'T.F'"
            ) from exc

    def __str__(self) -> str:
        return f"{self.total_bits}.{self.fraction_bits}"


def saturate(codes, fmt: FixedFormat) -> np.ndarray:
    """Clip integer codes to the representable range of ``fmt``."""
    return np.clip(codes, fmt.min_code, fmt.max_code)


def quantize(x, fmt: FixedFormat, rounding: str = "nearest-even"):
    """Real values -> integer codes (round on the code grid, then saturate)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise UsageError("cannot quantize NaN")
    scaled = x * fmt.scale
    if rounding == "nearest-even":
        codes = np.rint(scaled)
    elif rounding == "truncate":
        codes = np.floor(scaled)
    else:
        raise UsageError(f"unknown rounding mode {rounding!r}")
    codes = saturate(codes, fmt).astype(np.int64)
    return codes if codes.ndim else codes[()]


def to_real(codes, fmt: FixedFormat):
    """Integer codes -> real values (exact in float64 for total_bits <= 52)."""
    return np.asarray(codes, dtype=np.float64) / fmt.scale


def rne_shift_right(v, s: int):
    """Arithmetic right shift with round-to-nearest, ties to even.

    Equivalent to rounding the rational v / 2**s to the nearest integer.
    Works on negative values because the arithmetic shift floors and the
    remainder ``v & (2**s - 1)`` is always non-negative.
    """
    if s == 0:
        return np.asarray(v, dtype=np.int64) if np.ndim(v) else np.int64(v)
    v = np.asarray(v, dtype=np.int64)
    q = v >> s
    r = v & ((np.int64(1) << s) - 1)
    half = np.int64(1) << (s - 1)
    bump = (r > half) | ((r == half) & ((q & 1) == 1))
    out = q + bump
    return out if out.ndim else out[()]


def _check_formats(fmt: FixedFormat, other_format: FixedFormat | None) -> None:
    if other_format is not None and other_format != fmt:
        raise UsageError(
            f"format mismatch: {other_format} operand used in {fmt} arithmetic"
        )


def add(a, b, fmt: FixedFormat, other_format: FixedFormat | None = None):
    """Saturating addition of two code arrays in the same format."""
    _check_formats(fmt, other_format)
    out = saturate(np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64), fmt)
    return out if out.ndim else out[()]


def mul(a, b, fmt: FixedFormat, other_format: FixedFormat | None = None,
        rounding: str = "nearest-even"):
    """Multiply codes: exact double-width product, then one round-and-saturate."""
    _check_formats(fmt, other_format)
    prod = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    if rounding == "nearest-even":
        out = rne_shift_right(prod, fmt.fraction_bits)
    elif rounding == "truncate":
        out = np.asarray(prod, dtype=np.int64) >> fmt.fraction_bits
    else:
        raise UsageError(f"unknown rounding mode {rounding!r}")
    out = saturate(out, fmt)
    return out if np.ndim(out) else out[()]


def mac_accumulate(a, b, fmt: FixedFormat, rounding: str = "nearest-even"):
    """Dot product of two code vectors with exact accumulation.

    Products are summed exactly at double scale in int64; a single terminal
    rounding returns to the format.  The result is independent of summation
    order.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise UsageError(f"mac operand shapes differ: {a.shape} vs {b.shape}")
    acc = int(np.sum(a * b, dtype=np.int64))
    if rounding == "nearest-even":
        out = rne_shift_right(np.int64(acc), fmt.fraction_bits)
    else:
        out = np.int64(acc) >> fmt.fraction_bits
    return int(saturate(out, fmt))


def fixed_matmul(a, b, fmt: FixedFormat, bias=None, rounding: str = "nearest-even"):
    """Matrix product of code arrays with one terminal rounding per element.

    ``a @ b`` is accumulated exactly in int64 at double scale; an optional
    bias (codes in ``fmt``) enters the accumulator at double scale before the
    single rounding, so the whole affine map rounds exactly once.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    acc = a @ b
    if bias is not None:
        acc = acc + (np.asarray(bias, dtype=np.int64) << fmt.fraction_bits)
    if rounding == "nearest-even":
        out = rne_shift_right(acc, fmt.fraction_bits)
    else:
        out = acc >> fmt.fraction_bits
    return saturate(out, fmt)


def ensure_integer_codes(*arrays) -> None:
    """Guard used by fixed-point evaluators: every operand must be integer.

    Raises UsageError if any array has a floating dtype, enforcing that no
    float operation sneaks in between input quantization and the logits.
    """
    for arr in arrays:
        if not np.issubdtype(np.asarray(arr).dtype, np.integer):
            raise UsageError(
                f"fixed-point evaluator touched a non-integer dtype: "
                f"{np.asarray(arr).dtype}"
            )
