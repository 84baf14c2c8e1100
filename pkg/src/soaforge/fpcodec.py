"""Truncated IEEE storage formats.

A stored value of total width ``T`` uses the smallest IEEE format that can
hold it (binary16, binary32 or binary64) with the mantissa cut down until the
whole encoding is ``T`` bits wide.  Encoding rounds to the base format with
round-to-nearest-even and then drops low mantissa bits (round toward zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "MIN_TOTAL_BITS",
    "MAX_TOTAL_BITS",
    "PrecisionError",
    "PrecisionSpec",
    "PackedScalar",
    "layout_for",
    "encode",
    "decode",
    "quantize",
    "encode_array",
    "decode_array",
    "quantize_array",
]

MIN_TOTAL_BITS = 7
MAX_TOTAL_BITS = 64

# base width -> (exponent bits, mantissa bits, float dtype, unsigned dtype)
_BASE_FORMATS = {
    64: (11, 52, np.float64, np.uint64),
    32: (8, 23, np.float32, np.uint32),
    16: (5, 10, np.float16, np.uint16),
}


class PrecisionError(ValueError):
    """Invalid total width for a storage format."""


@dataclass(frozen=True)
class PrecisionSpec:
    total_bits: int
    exponent_bits: int
    mantissa_bits: int
    sign_bits: int = 1

    @property
    def base_bits(self) -> int:
        """Width of the IEEE format this spec truncates."""
        return 1 + self.exponent_bits + _BASE_FORMATS_BY_EXP[self.exponent_bits]

    @property
    def base_mantissa_bits(self) -> int:
        return _BASE_FORMATS_BY_EXP[self.exponent_bits]

    @property
    def dropped_bits(self) -> int:
        return self.base_mantissa_bits - self.mantissa_bits

    @property
    def is_ieee(self) -> bool:
        return self.dropped_bits == 0

    def __str__(self) -> str:
        return f"T{self.total_bits}(1,{self.exponent_bits},{self.mantissa_bits})"


_BASE_FORMATS_BY_EXP = {exp: mant for exp, mant, _, _ in _BASE_FORMATS.values()}


@dataclass(frozen=True)
class PackedScalar:
    bits: int
    spec: PrecisionSpec

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.spec.total_bits:
            raise ValueError(
                f"bits 0x{self.bits:x} do not fit in {self.spec.total_bits} bits"
            )


@lru_cache(maxsize=None)
def layout_for(total_bits: int) -> PrecisionSpec:
    """Sign/exponent/mantissa split for a stored width of ``total_bits``."""
    if isinstance(total_bits, bool) or not isinstance(total_bits, (int, np.integer)):
        raise PrecisionError(f"total_bits must be an integer, got {total_bits!r}")
    total_bits = int(total_bits)
    if total_bits < MIN_TOTAL_BITS:
        raise PrecisionError(
            f"total_bits={total_bits} is below the minimum of {MIN_TOTAL_BITS} "
            "(1 sign + 5 exponent + 1 mantissa)"
        )
    if total_bits > MAX_TOTAL_BITS:
        raise PrecisionError(
            f"total_bits={total_bits} exceeds the maximum of {MAX_TOTAL_BITS}"
        )
    if total_bits >= 33:
        exp = 11
    elif total_bits >= 17:
        exp = 8
    else:
        exp = 5
    return PrecisionSpec(total_bits, exp, total_bits - 1 - exp)


def _base(spec: PrecisionSpec):
    return _BASE_FORMATS[spec.base_bits]


def encode_array(values, spec: PrecisionSpec) -> np.ndarray:
    """Encode binary64 values into ``spec.total_bits``-wide codes (uint64)."""
    x = np.asarray(values, dtype=np.float64)
    _, base_mant, ftype, utype = _base(spec)
    with np.errstate(over="ignore", invalid="ignore"):
        raw = x.astype(ftype).view(utype).astype(np.uint64)
    codes = raw >> np.uint64(spec.dropped_bits)
    nan = np.isnan(x)
    if nan.any():
        # keep NaN a NaN once the payload is truncated
        codes = np.where(nan, codes | np.uint64(1 << (spec.mantissa_bits - 1)), codes)
    return codes


def decode_array(codes, spec: PrecisionSpec) -> np.ndarray:
    """Expand codes produced by :func:`encode_array` back to binary64."""
    c = np.asarray(codes, dtype=np.uint64)
    _, _, ftype, utype = _base(spec)
    raw = (c << np.uint64(spec.dropped_bits)).astype(utype)
    return raw.view(ftype).astype(np.float64)


def quantize_array(values, spec: PrecisionSpec) -> np.ndarray:
    return decode_array(encode_array(values, spec), spec)


def encode(x: float, spec: PrecisionSpec) -> PackedScalar:
    return PackedScalar(int(encode_array(np.float64(x), spec)), spec)


def decode(p: PackedScalar) -> float:
    return float(decode_array(np.uint64(p.bits), p.spec))


def quantize(x: float, spec: PrecisionSpec) -> float:
    """``decode(encode(x, spec))``."""
    return float(quantize_array(np.float64(x), spec))
