"""Bit fields at arbitrary offsets in a contiguous byte buffer.

Bit ``k`` of a stream lives in byte ``k >> 3`` at bit position ``k & 7``
(little-endian within the stream).  Field widths run from 1 to 64 bits.
"""

from __future__ import annotations

import numpy as np

from soaforge import _backend

__all__ = ["BitBuffer", "BitBoundsError", "MAX_WIDTH", "hexdump"]

MAX_WIDTH = 64


class BitBoundsError(IndexError):
    """A bit slot reaches outside the buffer."""


def _check_width(width: int) -> None:
    if not 1 <= width <= MAX_WIDTH:
        raise ValueError(f"field width must be in 1..{MAX_WIDTH}, got {width}")


class BitBuffer:
    """Owned byte storage holding ``length_bits`` meaningful bits.

    ``data`` may be a view into a larger pooled allocation; the buffer only
    ever touches its first ``nbytes`` bytes.
    """

    __slots__ = ("data", "length_bits")

    def __init__(self, length_bits: int, data: np.ndarray | None = None):
        if length_bits < 0:
            raise ValueError("length_bits must be non-negative")
        nbytes = (length_bits + 7) >> 3
        if data is None:
            data = np.zeros(nbytes, dtype=np.uint8)
        elif data.dtype != np.uint8 or data.ndim != 1 or data.size != nbytes:
            raise ValueError(f"expected a uint8 array of {nbytes} bytes")
        self.data = data
        self.length_bits = length_bits

    @classmethod
    def from_bytes(cls, raw: bytes, length_bits: int | None = None) -> "BitBuffer":
        if length_bits is None:
            length_bits = 8 * len(raw)
        buf = cls(length_bits)
        n = buf.data.size
        if len(raw) < n:
            raise ValueError("not enough bytes for length_bits")
        buf.data[:] = np.frombuffer(raw[:n], dtype=np.uint8)
        tail = length_bits & 7
        if tail:
            buf.data[-1] &= (1 << tail) - 1
        return buf

    @property
    def nbytes(self) -> int:
        return self.data.size

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def copy(self) -> "BitBuffer":
        return BitBuffer(self.length_bits, self.data.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitBuffer):
            return NotImplemented
        return self.length_bits == other.length_bits and np.array_equal(
            self.data, other.data
        )

    def __repr__(self) -> str:
        return f"BitBuffer(length_bits={self.length_bits})"

    def _check_slot(self, offset: int, width: int) -> None:
        _check_width(width)
        if offset < 0 or offset + width > self.length_bits:
            raise BitBoundsError(
                f"slot [{offset}, {offset + width}) outside buffer of "
                f"{self.length_bits} bits"
            )

    def read_bits(self, offset: int, width: int) -> int:
        self._check_slot(offset, width)
        first = offset >> 3
        last = (offset + width - 1) >> 3
        chunk = int.from_bytes(self.data[first : last + 1].tobytes(), "little")
        return (chunk >> (offset & 7)) & ((1 << width) - 1)

    def write_bits(self, offset: int, width: int, value: int) -> None:
        self._check_slot(offset, width)
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        first = offset >> 3
        last = (offset + width - 1) >> 3
        span = self.data[first : last + 1]
        chunk = int.from_bytes(span.tobytes(), "little")
        shift = offset & 7
        mask = ((1 << width) - 1) << shift
        chunk = (chunk & ~mask) | (value << shift)
        span[:] = np.frombuffer(chunk.to_bytes(span.size, "little"), dtype=np.uint8)

    def _check_slots(self, offsets: np.ndarray, width: int) -> np.ndarray:
        _check_width(width)
        offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        if offsets.size and (
            offsets.min() < 0 or offsets.max() + width > self.length_bits
        ):
            raise BitBoundsError("slot array reaches outside the buffer")
        return offsets

    def gather(self, offsets, width: int) -> np.ndarray:
        """Read one ``width``-bit field per offset; returns uint64."""
        offsets = self._check_slots(offsets, width)
        return _backend.impl.gather_bits(self.data, offsets, width)

    def scatter(self, offsets, width: int, values) -> None:
        """Write ``values[i]`` into the slot at ``offsets[i]``.

        Slots must not overlap each other.
        """
        offsets = self._check_slots(offsets, width)
        values = np.ascontiguousarray(values, dtype=np.uint64)
        if values.shape != offsets.shape:
            raise ValueError("offsets and values differ in shape")
        if width < 64 and values.size and (values >> np.uint64(width)).any():
            raise ValueError(f"value does not fit in {width} bits")
        _backend.impl.scatter_bits(self.data, offsets, width, values)


def hexdump(buf: BitBuffer, per_line: int = 16) -> str:
    """Hex text, ``per_line`` bytes per line."""
    raw = buf.tobytes()
    lines = [raw[i : i + per_line].hex() for i in range(0, len(raw), per_line)]
    return "\n".join(lines) + ("\n" if lines else "")
