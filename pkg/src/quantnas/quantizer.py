"""Linear fixed-point quantization.

Activations (post-ReLU, non-negative) use the unsigned grid
``clip(round(x / dq) * dq, 0, B - dq)`` with ``B = 2**ai`` and ``dq = 2**-af``.
Weights and biases use the signed grid ``clip(round(x / dq) * dq, -B, B - dq)``
with ``B = 2**(wi - 1)`` and ``dq = 2**-wf``.

Rounding is half away from zero.  Degenerate formats (all-zero bit widths)
collapse to a single-point grid instead of erroring, so a sampled child
network can always be costed and rewarded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class FixedPointFormat:
    signed: bool
    int_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.int_bits < 0 or self.frac_bits < 0:
            raise ValueError("bit widths must be non-negative")

    @property
    def delta_q(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def range_b(self) -> float:
        return 2.0 ** (self.int_bits - 1) if self.signed else 2.0 ** self.int_bits


def format_range(fmt: FixedPointFormat) -> tuple[float, float, float]:
    """(lo, hi, delta_q) of the representable grid; hi is clamped so hi >= lo."""
    b, dq = fmt.range_b, fmt.delta_q
    lo = -b if fmt.signed else 0.0
    hi = max(lo, b - dq)
    return lo, hi, dq


def _round_half_away(y: float) -> int:
    # floor(y) and y - floor(y) are both exact for |y| < 2**53, which covers
    # every value that survives the pre-clip below.
    n = math.floor(y)
    r = y - n
    if r > 0.5 or (r == 0.5 and y > 0):
        n += 1
    return n


def _quantize(x: float, fmt: FixedPointFormat) -> float:
    if not isinstance(x, (int, float)) or isinstance(x, bool):
        raise ValueError(f"quantizer input must be a real number, got {x!r}")
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"quantizer input must be finite, got {x!r}")
    lo, hi, dq = format_range(fmt)
    if x <= lo:
        return lo
    if x >= hi:
        return hi
    # x / dq is an exact power-of-two scaling; no precision is lost here.
    n = _round_half_away(x / dq)
    return min(max(n * dq, lo), hi)


def quantize_unsigned(x: float, ai: int, af: int) -> float:
    return _quantize(x, FixedPointFormat(signed=False, int_bits=ai, frac_bits=af))


def quantize_signed(x: float, wi: int, wf: int) -> float:
    return _quantize(x, FixedPointFormat(signed=True, int_bits=wi, frac_bits=wf))


def quantize(x: float, fmt: FixedPointFormat) -> float:
    return _quantize(x, fmt)


def format_range_exact(fmt: FixedPointFormat) -> tuple[Fraction, Fraction, Fraction]:
    """Rational twin of format_range, for exact datapath arithmetic."""
    two = Fraction(2)
    dq = two ** -fmt.frac_bits
    b = two ** (fmt.int_bits - 1) if fmt.signed else two ** fmt.int_bits
    lo = -b if fmt.signed else Fraction(0)
    hi = max(lo, b - dq)
    return lo, hi, dq


def quantize_exact(x: Fraction, fmt: FixedPointFormat) -> Fraction:
    """Same mapping as quantize(), evaluated without floating point."""
    lo, hi, dq = format_range_exact(fmt)
    if x <= lo:
        return lo
    if x >= hi:
        return hi
    y = x / dq
    if y >= 0:
        n = math.floor(y + Fraction(1, 2))
    else:
        n = -math.floor(-y + Fraction(1, 2))
    return min(max(n * dq, lo), hi)


def on_grid(x: float, fmt: FixedPointFormat) -> bool:
    """True when x is exactly representable in fmt (a clip bound also counts)."""
    if not math.isfinite(x):
        return False
    lo, hi, _ = format_range_exact(fmt)
    fx = Fraction(x)
    if fx < lo or fx > hi:
        return False
    scaled = fx * 2 ** fmt.frac_bits
    return scaled.denominator == 1 or fx in (lo, hi)
