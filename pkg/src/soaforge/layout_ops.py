"""Narrowing, layout conversion, precision unpack/pack and movement.

A :class:`PackedBuffer` is a block of records stored as one bit stream.  Its
four tags (layout, precision, field subset, home arena) select how the
stream is laid out:

* AoS: record after record, fields in declaration order, no padding.
* SoA: one stream per field, concatenated in declaration order; within a
  stream, records in order with the lanes of a vector field adjacent.
* Compressed: each float lane takes its truncated width.
* Native: each float lane takes the width of its enclosing IEEE format.

Every operator returns a new buffer and leaves its inputs untouched.
"""

from __future__ import annotations

import csv
import hashlib
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Iterable, Mapping

import numpy as np

from soaforge.bitpack import BitBuffer
from soaforge.fpcodec import decode_array, encode_array, layout_for
from soaforge.schema import FieldDecl, KernelAccessSet, RecordSchema

__all__ = [
    "Layout",
    "Precision",
    "LayoutError",
    "PackedBuffer",
    "TransferLedger",
    "Arena",
    "Memory",
    "allocate",
    "pack_records",
    "unpack_records",
    "read_raw",
    "write_raw",
    "read_field",
    "write_field",
    "narrow",
    "widen_merge",
    "aos_to_soa",
    "soa_to_aos",
    "unpack",
    "pack",
    "move",
    "checksum",
    "record_bits",
]


class Layout(str, Enum):
    AOS = "AoS"
    SOA = "SoA"


class Precision(str, Enum):
    COMPRESSED = "Compressed"
    NATIVE = "Native"


class LayoutError(ValueError):
    """An operator was applied to a buffer with the wrong tags or shape."""


def lane_bits(f: FieldDecl, precision: Precision) -> int:
    return f.stored_bits if precision is Precision.COMPRESSED else f.native_bits


def record_bits(schema: RecordSchema, precision: Precision, fields: Iterable[str] | None = None) -> int:
    """Bits one record occupies for ``fields`` (default: all) at ``precision``."""
    names = schema.names if fields is None else schema.ordered(fields)
    return sum(schema.field(n).arity * lane_bits(schema.field(n), precision) for n in names)


@lru_cache(maxsize=64)
def _geometry(schema: RecordSchema, fields: tuple[str, ...], layout: Layout, precision: Precision, count: int):
    """Per field: (bit offsets shaped (count, arity), lane width)."""
    geo = {}
    rec = record_bits(schema, precision, fields)
    rows = np.arange(count, dtype=np.int64)
    start = 0
    for name in fields:
        f = schema.field(name)
        w = lane_bits(f, precision)
        lanes = np.arange(f.arity, dtype=np.int64) * w
        if layout is Layout.AOS:
            offs = rows[:, None] * rec + start + lanes
            start += f.arity * w
        else:
            offs = start + rows[:, None] * (f.arity * w) + lanes
            start += count * f.arity * w
        offs.setflags(write=False)
        geo[name] = (offs, w)
    return geo


@dataclass
class PackedBuffer:
    schema: RecordSchema
    count: int
    layout: Layout
    precision: Precision
    fields: tuple[str, ...]
    data: BitBuffer
    home: str = "host"
    writes: frozenset[str] = frozenset()

    @property
    def is_full(self) -> bool:
        return self.fields == self.schema.names

    @property
    def record_bits(self) -> int:
        return record_bits(self.schema, self.precision, self.fields)

    @property
    def length_bits(self) -> int:
        return self.count * self.record_bits

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def geometry(self):
        return _geometry(self.schema, self.fields, self.layout, self.precision, self.count)

    def slots(self, name: str, rows=None) -> tuple[np.ndarray, int]:
        if name not in self.fields:
            raise LayoutError(f"field {name!r} is not present in this buffer")
        offs, w = self.geometry()[name]
        if rows is not None:
            offs = offs[rows]
        return offs, w

    def tags(self) -> str:
        return f"{self.layout.value}/{self.precision.value}/{'All' if self.is_full else ','.join(self.fields)}@{self.home}"


# -- transfer accounting ---------------------------------------------------


@dataclass(frozen=True)
class Transfer:
    variant: str
    kernel: str
    direction: str
    nbytes: int


class TransferLedger:
    """Exact byte accounting with a latency/bandwidth cost model.

    The modeled time of one transfer is ``latency_s + nbytes / bandwidth_Bps``.
    Safe to share between threads.
    """

    def __init__(self, latency_s: float = 5e-6, bandwidth_Bps: float = 64e9):
        if latency_s < 0 or bandwidth_Bps <= 0:
            raise ValueError("latency must be >= 0 and bandwidth > 0")
        self.latency_s = latency_s
        self.bandwidth_Bps = bandwidth_Bps
        self._lock = threading.Lock()
        self._local = threading.local()
        self._transfers: list[Transfer] = []

    @contextmanager
    def labels(self, variant: str | None = None, kernel: str | None = None):
        prev = getattr(self._local, "labels", ("", ""))
        self._local.labels = (
            prev[0] if variant is None else variant,
            prev[1] if kernel is None else kernel,
        )
        try:
            yield self
        finally:
            self._local.labels = prev

    def record(self, direction: str, nbytes: int) -> None:
        variant, kernel = getattr(self._local, "labels", ("", ""))
        with self._lock:
            self._transfers.append(Transfer(variant, kernel, direction, int(nbytes)))

    def transfer_time(self, nbytes: int) -> float:
        return self.latency_s + nbytes / self.bandwidth_Bps

    @property
    def transfers(self) -> list[Transfer]:
        with self._lock:
            return list(self._transfers)

    @property
    def transfer_count(self) -> int:
        return len(self.transfers)

    def bytes_moved(self, direction: str | None = None, kernel: str | None = None) -> int:
        return sum(
            t.nbytes
            for t in self.transfers
            if (direction is None or t.direction == direction)
            and (kernel is None or t.kernel == kernel)
        )

    def modeled_time_s(self) -> float:
        return sum(self.transfer_time(t.nbytes) for t in self.transfers)

    def snapshot(self) -> dict:
        per_dir: dict[str, int] = defaultdict(int)
        for t in self.transfers:
            per_dir[t.direction] += t.nbytes
        return {
            "bytes": dict(per_dir),
            "transfers": self.transfer_count,
            "modeled_time_s": self.modeled_time_s(),
        }

    def rows(self) -> list[dict]:
        agg: dict[tuple, list] = {}
        for t in self.transfers:
            key = (t.variant, t.kernel, t.direction)
            entry = agg.setdefault(key, [0, 0, 0.0])
            entry[0] += t.nbytes
            entry[1] += 1
            entry[2] += self.transfer_time(t.nbytes)
        return [
            {
                "variant": v,
                "kernel": k,
                "direction": d,
                "bytes": b,
                "transfers": n,
                "modeled_time_s": f"{s:.9g}",
            }
            for (v, k, d), (b, n, s) in agg.items()
        ]

    def write_csv(self, fh) -> None:
        cols = ["variant", "kernel", "direction", "bytes", "transfers", "modeled_time_s"]
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())


class Arena:
    """A named memory space.

    Keyed allocations are pooled: the backing array for a key only ever
    grows, and is handed out again (zeroed) on the next request.
    """

    def __init__(self, id: str, ledger: TransferLedger | None = None):
        self.id = id
        self.ledger = ledger if ledger is not None else TransferLedger()
        self._pool: dict = {}
        self._lock = threading.Lock()
        self.allocations = 0
        self.pool_hits = 0

    def allocate(self, length_bits: int, key=None) -> BitBuffer:
        nbytes = (length_bits + 7) >> 3
        with self._lock:
            self.allocations += 1
            if key is None:
                return BitBuffer(length_bits)
            backing = self._pool.get(key)
            if backing is None or backing.size < nbytes:
                backing = np.zeros(max(nbytes, 0 if backing is None else backing.size), np.uint8)
                self._pool[key] = backing
            else:
                self.pool_hits += 1
        view = backing[:nbytes]
        view[:] = 0
        return BitBuffer(length_bits, view)

    @property
    def pool_bytes(self) -> int:
        return sum(b.size for b in self._pool.values())

    def __repr__(self) -> str:
        return f"Arena({self.id!r})"


class Memory:
    """A host arena and a simulated device arena sharing one ledger."""

    def __init__(self, latency_s: float = 5e-6, bandwidth_Bps: float = 64e9):
        self.ledger = TransferLedger(latency_s, bandwidth_Bps)
        self.host = Arena("host", self.ledger)
        self.device = Arena("device", self.ledger)

    def __getitem__(self, id: str) -> Arena:
        if id == "host":
            return self.host
        if id == "device":
            return self.device
        raise KeyError(id)


# -- construction and field access ----------------------------------------


def allocate(
    schema: RecordSchema,
    count: int,
    layout: Layout = Layout.AOS,
    precision: Precision = Precision.COMPRESSED,
    fields: Iterable[str] | None = None,
    *,
    arena: Arena | None = None,
    key=None,
    home: str | None = None,
    writes: frozenset[str] = frozenset(),
) -> PackedBuffer:
    names = schema.names if fields is None else schema.ordered(fields)
    nbits = count * record_bits(schema, precision, names)
    data = arena.allocate(nbits, key) if arena is not None else BitBuffer(nbits)
    if home is None:
        home = arena.id if arena is not None else "host"
    return PackedBuffer(schema, count, Layout(layout), Precision(precision), names, data, home, writes)


def read_raw(buf: PackedBuffer, name: str, rows=None) -> np.ndarray:
    offs, w = buf.slots(name, rows)
    return buf.data.gather(offs.reshape(-1), w).reshape(offs.shape)


def write_raw(buf: PackedBuffer, name: str, codes, rows=None) -> None:
    offs, w = buf.slots(name, rows)
    codes = np.asarray(codes, dtype=np.uint64)
    if codes.shape != offs.shape:
        codes = codes.reshape(offs.shape)
    buf.data.scatter(offs.reshape(-1), w, codes.reshape(-1))


def _lane_spec(f: FieldDecl, precision: Precision):
    spec = f.spec
    if precision is Precision.NATIVE:
        spec = layout_for(spec.base_bits)
    return spec


def _squeeze(f: FieldDecl, arr: np.ndarray) -> np.ndarray:
    return arr[:, 0] if f.arity == 1 else arr


def read_field(buf: PackedBuffer, name: str, rows=None) -> np.ndarray:
    """Values of one field, shape (n,) or (n, 3); float64, or int64 for i64."""
    f = buf.schema.field(name)
    codes = read_raw(buf, name, rows)
    if not f.is_float:
        return _squeeze(f, codes.view(np.int64))
    return _squeeze(f, decode_array(codes, _lane_spec(f, buf.precision)))


def field_codes(f: FieldDecl, values, precision: Precision) -> np.ndarray:
    """Codes for storing ``values`` into field ``f`` at ``precision``.

    Stores always round through the field's declared storage format, so a
    native buffer only ever holds values the compressed format can represent.
    """
    if not f.is_float:
        return np.asarray(values, dtype=np.int64).view(np.uint64)
    codes = encode_array(values, f.spec)
    if precision is Precision.NATIVE and not f.spec.is_ieee:
        codes = encode_array(decode_array(codes, f.spec), layout_for(f.spec.base_bits))
    return codes


def write_field(buf: PackedBuffer, name: str, values, rows=None) -> None:
    f = buf.schema.field(name)
    values = np.asarray(values)
    if f.arity == 1 and values.ndim == 1:
        values = values[:, None]
    write_raw(buf, name, field_codes(f, values, buf.precision), rows)


def pack_records(
    schema: RecordSchema,
    state: Mapping[str, np.ndarray],
    layout: Layout = Layout.AOS,
    precision: Precision = Precision.COMPRESSED,
    *,
    arena: Arena | None = None,
) -> PackedBuffer:
    """Build a full buffer from per-field arrays (missing fields stay zero)."""
    unknown = set(state) - set(schema.names)
    if unknown:
        raise LayoutError(f"state has fields not in the schema: {sorted(unknown)}")
    counts = {len(np.asarray(v)) for v in state.values()}
    if len(counts) != 1:
        raise LayoutError("all fields must have the same record count")
    buf = allocate(schema, counts.pop(), layout, precision, arena=arena)
    for name, values in state.items():
        write_field(buf, name, values)
    return buf


def unpack_records(buf: PackedBuffer) -> dict[str, np.ndarray]:
    return {name: read_field(buf, name) for name in buf.fields}


# -- operators -------------------------------------------------------------


def _target(buf: PackedBuffer, arena: Arena | None, key, **changes) -> PackedBuffer:
    proto = replace(buf, **changes)
    return allocate(
        proto.schema,
        proto.count,
        proto.layout,
        proto.precision,
        proto.fields,
        arena=arena,
        key=key,
        home=buf.home if arena is None else arena.id,
        writes=proto.writes,
    )


def _copy_fields(src: PackedBuffer, dst: PackedBuffer, names: Iterable[str]) -> None:
    for name in names:
        write_raw(dst, name, read_raw(src, name))


def narrow(buf: PackedBuffer, access: KernelAccessSet, *, arena: Arena | None = None, key=None) -> PackedBuffer:
    """Project onto the fields ``access`` reads or writes."""
    if not buf.is_full:
        raise LayoutError("narrow expects a buffer holding every field")
    try:
        names = buf.schema.ordered(access.fields)
    except KeyError as exc:
        raise LayoutError(f"kernel {access.kernel!r}: {exc.args[0]}") from None
    out = _target(buf, arena, key, fields=names, writes=frozenset(access.writes))
    _copy_fields(buf, out, names)
    return out


def widen_merge(narrowed: PackedBuffer, original: PackedBuffer, *, arena: Arena | None = None, key=None) -> PackedBuffer:
    """Copy of ``original`` with the write-set fields taken from ``narrowed``."""
    if narrowed.schema != original.schema:
        raise LayoutError("widen_merge: buffers use different schemas")
    if narrowed.count != original.count:
        raise LayoutError(f"widen_merge: record counts differ ({narrowed.count} vs {original.count})")
    if narrowed.precision is not original.precision:
        raise LayoutError("widen_merge: precision tags differ")
    missing = set(narrowed.writes) - set(original.fields)
    if missing or not set(narrowed.writes) <= set(narrowed.fields):
        raise LayoutError(f"widen_merge: write set {sorted(narrowed.writes)} not present in both buffers")
    out = _target(original, arena, key)
    out.data.data[:] = original.data.data
    _copy_fields(narrowed, out, original.schema.ordered(narrowed.writes))
    return out


def _convert_layout(buf, want_from, want_to, arena, key):
    if buf.layout is not want_from:
        raise LayoutError(f"expected a {want_from.value} buffer, got {buf.layout.value}")
    out = _target(buf, arena, key, layout=want_to)
    _copy_fields(buf, out, buf.fields)
    return out


def aos_to_soa(buf: PackedBuffer, *, arena: Arena | None = None, key=None) -> PackedBuffer:
    return _convert_layout(buf, Layout.AOS, Layout.SOA, arena, key)


def soa_to_aos(buf: PackedBuffer, *, arena: Arena | None = None, key=None) -> PackedBuffer:
    return _convert_layout(buf, Layout.SOA, Layout.AOS, arena, key)


def unpack(buf: PackedBuffer, *, arena: Arena | None = None, key=None) -> PackedBuffer:
    """Expand every truncated lane to its enclosing IEEE format."""
    if buf.precision is not Precision.COMPRESSED:
        raise LayoutError("unpack expects a Compressed buffer")
    out = _target(buf, arena, key, precision=Precision.NATIVE)
    for name in buf.fields:
        f = buf.schema.field(name)
        codes = read_raw(buf, name)
        if f.is_float and not f.spec.is_ieee:
            codes = encode_array(decode_array(codes, f.spec), layout_for(f.spec.base_bits))
        write_raw(out, name, codes)
    return out


def pack(buf: PackedBuffer, *, arena: Arena | None = None, key=None) -> PackedBuffer:
    """Truncate every native lane to its declared storage width."""
    if buf.precision is not Precision.NATIVE:
        raise LayoutError("pack expects a Native buffer")
    out = _target(buf, arena, key, precision=Precision.COMPRESSED)
    for name in buf.fields:
        f = buf.schema.field(name)
        codes = read_raw(buf, name)
        if f.is_float and not f.spec.is_ieee:
            codes = encode_array(decode_array(codes, layout_for(f.spec.base_bits)), f.spec)
        write_raw(out, name, codes)
    return out


def move(buf: PackedBuffer, to: Arena, *, key=None) -> PackedBuffer:
    """Byte-identical copy in ``to``; the ledger is charged ``buf.nbytes``."""
    if buf.home == to.id:
        raise LayoutError(f"buffer already lives in {to.id!r}")
    out = _target(buf, to, key)
    out.data.data[:] = buf.data.data
    to.ledger.record(f"{buf.home}->{to.id}", buf.nbytes)
    return out


def checksum(buffers: PackedBuffer | Iterable[PackedBuffer]) -> str:
    """SHA-256 over tags and bytes of one or more buffers."""
    if isinstance(buffers, PackedBuffer):
        buffers = [buffers]
    h = hashlib.sha256()
    for b in buffers:
        h.update(f"{b.count}|{b.tags()}|{b.data.length_bits};".encode())
        h.update(b.data.tobytes())
    return h.hexdigest()
