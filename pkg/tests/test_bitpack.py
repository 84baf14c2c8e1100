import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soaforge import _backend
from soaforge.bitpack import BitBoundsError, BitBuffer, hexdump

BACKENDS = [b for b in (_backend.purepy, _backend.native) if b is not None]


class IntOracle:
    """The stream as one Python int: bit k of the stream is bit k of the int."""

    def __init__(self, nbits):
        self.n = nbits
        self.v = 0

    def write(self, off, width, value):
        mask = ((1 << width) - 1) << off
        self.v = (self.v & ~mask) | (value << off)

    def read(self, off, width):
        return (self.v >> off) & ((1 << width) - 1)

    def tobytes(self):
        return self.v.to_bytes((self.n + 7) // 8, "little")


def test_bit_order_little_endian():
    b = BitBuffer(16)
    b.write_bits(0, 1, 1)
    b.write_bits(9, 3, 0b101)
    assert b.tobytes() == bytes([0b00000001, 0b00001010])
    assert b.read_bits(9, 3) == 0b101
    assert b.read_bits(8, 1) == 0


def test_straddles_nine_bytes():
    b = BitBuffer(80)
    v = (1 << 64) - 3
    b.write_bits(7, 64, v)
    assert b.read_bits(7, 64) == v
    assert b.read_bits(0, 7) == 0 and b.read_bits(71, 9) == 0
    for impl in BACKENDS:
        assert int(impl.gather_bits(b.data, np.array([7], np.int64), 64)[0]) == v


def test_bounds_and_width_errors():
    b = BitBuffer(20)
    with pytest.raises(BitBoundsError):
        b.read_bits(15, 6)
    with pytest.raises(BitBoundsError):
        b.write_bits(-1, 2, 0)
    with pytest.raises(ValueError):
        b.read_bits(0, 0)
    with pytest.raises(ValueError):
        BitBuffer(200).read_bits(0, 65)
    with pytest.raises(ValueError):
        b.write_bits(0, 3, 8)
    with pytest.raises(BitBoundsError):
        b.gather([0, 10], 11)
    with pytest.raises(ValueError):
        b.scatter([0], 4, [16])


def test_from_bytes_masks_tail():
    b = BitBuffer.from_bytes(b"\xff\xff", 12)
    assert b.tobytes() == b"\xff\x0f"
    assert b == BitBuffer.from_bytes(b"\xff\x0f", 12)
    with pytest.raises(ValueError):
        BitBuffer.from_bytes(b"\x00", 12)


def test_hexdump():
    b = BitBuffer.from_bytes(bytes(range(20)))
    lines = hexdump(b).splitlines()
    assert lines == [bytes(range(16)).hex(), bytes(range(16, 20)).hex()]
    assert hexdump(BitBuffer(0)) == ""


@st.composite
def slot_plans(draw):
    width = draw(st.integers(1, 64))
    n = draw(st.integers(0, 40))
    gap = draw(st.integers(0, 9))
    start = draw(st.integers(0, 15))
    offs = [start + i * (width + gap) for i in range(n)]
    vals = [draw(st.integers(0, (1 << width) - 1)) for _ in range(n)]
    total = start + n * (width + gap) + draw(st.integers(0, 20))
    return width, offs, vals, max(total, 1)


@given(slot_plans())
def test_scalar_ops_match_oracle(plan):
    width, offs, vals, total = plan
    b, o = BitBuffer(total), IntOracle(total)
    for off, v in zip(offs, vals):
        b.write_bits(off, width, v)
        o.write(off, width, v)
    assert b.tobytes() == o.tobytes()
    assert [b.read_bits(off, width) for off in offs] == [o.read(off, width) for off in offs]


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda b: b.NAME)
@given(plan=slot_plans(), noise=st.binary(min_size=40, max_size=40))
def test_backend_gather_scatter_match_oracle(impl, plan, noise):
    width, offs, vals, total = plan
    raw = (noise * (total // 320 + 2))[: (total + 7) // 8]
    b = BitBuffer.from_bytes(raw, total)
    o = IntOracle(total)
    o.v = int.from_bytes(b.tobytes(), "little")
    offs_a = np.array(offs, dtype=np.int64)
    impl.scatter_bits(b.data, offs_a, width, np.array(vals, dtype=np.uint64))
    for off, v in zip(offs, vals):
        o.write(off, width, v)
    assert b.tobytes() == o.tobytes()
    got = impl.gather_bits(b.data, offs_a, width)
    assert [int(g) for g in got] == [o.read(off, width) for off in offs]


def test_gather_scatter_through_buffer(rng):
    for width in (1, 5, 8, 23, 33, 63, 64):
        n = 300
        b = BitBuffer(n * width + 5)
        offs = 5 + np.arange(n) * width
        vals = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False) & np.uint64((1 << width) - 1)
        b.scatter(offs, width, vals)
        assert np.array_equal(b.gather(offs, width), vals)
        assert [b.read_bits(int(off), width) for off in offs[:20]] == [int(v) for v in vals[:20]]


def test_scatter_leaves_neighbours_alone(rng):
    raw = rng.integers(0, 256, 64, dtype=np.uint8).tobytes()
    b = BitBuffer.from_bytes(raw)
    before = int.from_bytes(raw, "little")
    b.scatter([100], 37, [0])
    after = int.from_bytes(b.tobytes(), "little")
    mask = ((1 << 37) - 1) << 100
    assert after & ~mask == before & ~mask
    assert after & mask == 0
