"""Operator compositions around the SPH kernels.

Every variant starts from compressed AoS buffers holding all fields on the
host and returns buffers in that same form.  What changes is where (and
whether) the data is narrowed, unpacked, converted to SoA and moved:

=====================  ============================================
cpu-baseline           f on compressed AoS
cpu-unpack             N^T U^T . f . U N
cpu-soa                C^T N^T U^T . f . U N C
dev-native             M^-1 . f . M
dev-unpack             M^-1 . N^T U^T . f . U N . M
dev-soa                M^-1 . C^T N^T U^T . f . U N C . M
host-unpack-stream     N^T U^T . M^-1 . f . M . U N
host-soa-stream        C^T N^T U^T . M^-1 . f . M . U N C
=====================  ============================================

In ``inplace`` mode whole buffers cross the interconnect once per run and
all kernels execute on the device copy; in ``streaming`` mode each kernel
ships only its narrowed field set, both ways.  CPU variants never move
data and run identically in both modes.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from soaforge import layout_ops as ops
from soaforge.layout_ops import Arena, Layout, Memory, PackedBuffer, Precision
from soaforge.schema import KernelAccessSet
from soaforge.sph import KERNEL_ORDER, LINEAR, NEIGHBOURS, QUADRATIC, apply_kernel, identity_access

__all__ = [
    "Variant",
    "Mode",
    "RunMetrics",
    "PipelineError",
    "run_variant",
    "run_quadratic",
    "parse_pipeline_config",
    "canonical_order",
]


class PipelineError(ValueError):
    """Invalid variant, mode, kernel list or input buffers."""


class Variant(str, Enum):
    CPU_BASELINE = "cpu-baseline"
    CPU_UNPACK = "cpu-unpack"
    CPU_SOA = "cpu-soa"
    DEV_NATIVE = "dev-native"
    DEV_UNPACK = "dev-unpack"
    DEV_SOA = "dev-soa"
    HOST_UNPACK_STREAM = "host-unpack-stream"
    HOST_SOA_STREAM = "host-soa-stream"

    @property
    def placement(self) -> str:
        """Where conversion happens: ``cpu`` (no device), ``device`` or ``host``."""
        return self.value.split("-")[0].replace("dev", "device")

    @property
    def unpacks(self) -> bool:
        return self not in (Variant.CPU_BASELINE, Variant.DEV_NATIVE)

    @property
    def soa(self) -> bool:
        return "soa" in self.value

    @property
    def converts(self) -> bool:
        return self.unpacks


class Mode(str, Enum):
    INPLACE = "inplace"
    STREAMING = "streaming"


@dataclass
class RunMetrics:
    variant: str
    mode: str
    convert_s: float = 0.0
    move_s: float = 0.0
    compute_s: float = 0.0
    merge_s: float = 0.0
    kernel_s: dict[str, float] = field(default_factory=dict)
    conversions: int = 0
    ledger: dict = field(default_factory=dict)
    checksum: str = ""
    scratch_bytes: int = 0

    @property
    def total_s(self) -> float:
        return self.convert_s + self.move_s + self.compute_s + self.merge_s

    def kernel_shares(self) -> dict[str, float]:
        total = sum(self.kernel_s.values())
        return {k: (v / total if total > 0 else 0.0) for k, v in self.kernel_s.items()}


def canonical_order(kernels: Iterable[str]) -> list[str]:
    """``kernels`` in timestep order (density, force, kick, drift; others last)."""
    ks = list(dict.fromkeys(kernels))
    rank = {k: i for i, k in enumerate(KERNEL_ORDER)}
    return sorted(ks, key=lambda k: (rank.get(k, len(rank)), ks.index(k)))


class _Runner:
    def __init__(self, variant, mode, access, memory, dt, group, writeback, hoist, threads):
        self.variant = variant
        self.mode = mode
        self.access = access
        self.memory = memory
        self.dt = dt
        self.group = group
        self.writeback = writeback
        self.hoist = hoist
        self.threads = threads
        self.metrics = RunMetrics(variant.value, mode.value)

    @contextmanager
    def phase(self, name: str, kernel: str | None = None):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            setattr(self.metrics, f"{name}_s", getattr(self.metrics, f"{name}_s") + dt)
            if kernel is not None:
                self.metrics.kernel_s[kernel] = self.metrics.kernel_s.get(kernel, 0.0) + dt

    def key(self, kernel, stage, idx):
        return (self.variant.value, self.mode.value, kernel, stage, idx)

    # conversions -----------------------------------------------------------

    def convert_in(self, buf, kernel, arena, idx, narrow=True):
        """C (optional), N (optional), U; returns (view, pre-narrowing buffer)."""
        with self.phase("convert"):
            full = buf
            if self.variant.soa and full.layout is Layout.AOS:
                full = ops.aos_to_soa(full, arena=arena, key=self.key(kernel, "C", idx))
            view = full
            if narrow:
                view = ops.narrow(full, self.access[kernel], arena=arena, key=self.key(kernel, "N", idx))
            if self.variant.unpacks and view.precision is Precision.COMPRESSED:
                view = ops.unpack(view, arena=arena, key=self.key(kernel, "U", idx))
        return view, full

    def convert_out(self, view, full, kernel, arena, idx, to_aos=True):
        with self.phase("convert"):
            if view.precision is Precision.NATIVE and full.precision is Precision.COMPRESSED:
                view = ops.pack(view, arena=arena, key=self.key(kernel, "UT", idx))
        if view.fields != full.fields:
            with self.phase("merge"):
                view = ops.widen_merge(view, full, arena=arena, key=self.key(kernel, "NT", idx))
        if to_aos and view.layout is Layout.SOA:
            with self.phase("convert"):
                view = ops.soa_to_aos(view, arena=arena, key=self.key(kernel, "CT", idx))
        return view

    def move(self, buf, to: Arena, kernel, idx):
        with self.phase("move"):
            return ops.move(buf, to, key=self.key(kernel, f"M->{to.id}", idx))

    # compute ---------------------------------------------------------------

    def compute(self, kernel, view, j_source=None, arena=None, idx=0):
        """Run ``kernel`` on ``view`` in place.

        ``j_source`` is the unconverted buffer the inner loop would convert
        on every outer iteration when hoisting is off.
        """
        if kernel in QUADRATIC and not self.hoist and j_source is not None:
            self._unhoisted(kernel, view, j_source, arena, idx)
            return
        if self.variant.converts and j_source is not None:
            self.metrics.conversions += 1
        with self.phase("compute", kernel):
            apply_kernel(
                kernel, view, dt=self.dt, group=self.group, writeback=self.writeback, threads=self.threads
            )

    def _unhoisted(self, kernel, view, j_source, arena, idx):
        g = self.group
        for r in range(view.count):
            if j_source is view:
                j_view = view
            else:
                j_view, _ = self.convert_in(j_source, kernel, arena, ("j", idx))
            self.metrics.conversions += 1
            block = slice((r // g) * g, (r // g + 1) * g)
            with self.phase("compute", kernel):
                apply_kernel(
                    kernel,
                    view,
                    j_view,
                    group=g,
                    group_i=1,
                    rows_i=[r],
                    rows_j=block,
                    writeback=self.writeback,
                )

    # one kernel, converted where the buffer lives ---------------------------

    def step(self, kernel, buf, arena, idx):
        if not self.variant.converts:
            self.compute(kernel, buf, arena=arena, idx=idx)
            return buf
        view, full = self.convert_in(buf, kernel, arena, idx)
        self.compute(kernel, view, j_source=buf, arena=arena, idx=idx)
        return self.convert_out(view, full, kernel, arena, idx)


def _clone(buf: PackedBuffer) -> PackedBuffer:
    return PackedBuffer(
        buf.schema, buf.count, buf.layout, buf.precision, buf.fields, buf.data.copy(), buf.home, buf.writes
    )


def _resolve_access(kernels, access_sets, schema):
    if isinstance(access_sets, Mapping):
        access = dict(access_sets)
    else:
        access = {a.kernel: a for a in access_sets}
    access.setdefault("identity", identity_access(schema))
    for k in kernels:
        if k not in QUADRATIC and k not in LINEAR:
            raise PipelineError(f"unknown kernel {k!r}")
        if k not in access:
            raise PipelineError(f"no access set declared for kernel {k!r}")
        missing = access[k].fields - set(schema.names)
        if missing:
            raise PipelineError(f"kernel {k!r} accesses undeclared fields {sorted(missing)}")
    return access


def run_variant(
    variant: Variant | str,
    mode: Mode | str | None,
    kernels: Sequence[str],
    buffers: PackedBuffer | Sequence[PackedBuffer],
    access_sets: Mapping[str, KernelAccessSet] | Iterable[KernelAccessSet],
    *,
    memory: Memory | None = None,
    dt: float = 1e-3,
    group: int = NEIGHBOURS,
    writeback: str = "deferred",
    hoist: bool = True,
    threads: int = 1,
) -> tuple[list[PackedBuffer], RunMetrics]:
    """Apply ``kernels`` in order to every buffer using one variant.

    Each buffer is a contiguous run of neighbour groups of ``group``
    records.  Inputs are not modified.
    """
    try:
        variant = Variant(variant)
    except ValueError:
        raise PipelineError(f"unknown variant {variant!r}") from None
    if mode is None:
        if variant.placement != "cpu":
            raise PipelineError(f"variant {variant.value} needs a mode (inplace or streaming)")
        mode = Mode.INPLACE
    try:
        mode = Mode(mode)
    except ValueError:
        raise PipelineError(f"unknown mode {mode!r}") from None
    if writeback not in ("deferred", "per-access"):
        raise PipelineError(f"unknown writeback mode {writeback!r}")
    if isinstance(buffers, PackedBuffer):
        buffers = [buffers]
    if not buffers:
        raise PipelineError("no buffers given")
    schema = buffers[0].schema
    for b in buffers:
        if b.schema != schema:
            raise PipelineError("all buffers must share one schema")
        if not (b.layout is Layout.AOS and b.precision is Precision.COMPRESSED and b.is_full):
            raise PipelineError(f"expected compressed AoS buffers with every field, got {b.tags()}")
        if b.count % group:
            raise PipelineError(f"buffer of {b.count} records is not a whole number of {group}-record groups")
    access = _resolve_access(kernels, access_sets, schema)

    memory = memory if memory is not None else Memory()
    run = _Runner(variant, mode, access, memory, dt, group, writeback, hoist, threads)
    host, device = memory.host, memory.device
    state = [_clone(b) for b in buffers]
    for b in state:
        b.home = host.id

    with memory.ledger.labels(variant=variant.value):
        if variant.placement == "cpu":
            for k in kernels:
                with memory.ledger.labels(kernel=k):
                    state = [run.step(k, b, host, i) for i, b in enumerate(state)]
        elif variant.placement == "device":
            state = _device_side(run, kernels, state, host, device)
        else:
            state = _host_side(run, kernels, state, host, device)

    state = [_clone(b) for b in state]
    m = run.metrics
    m.ledger = memory.ledger.snapshot()
    m.checksum = ops.checksum(state)
    m.scratch_bytes = host.pool_bytes + device.pool_bytes
    return state, m


def _device_side(run: _Runner, kernels, state, host, device):
    ledger = run.memory.ledger
    if run.mode is Mode.INPLACE:
        with ledger.labels(kernel="all"):
            dev = [run.move(b, device, "all", i) for i, b in enumerate(state)]
        for k in kernels:
            dev = [run.step(k, d, device, i) for i, d in enumerate(dev)]
        with ledger.labels(kernel="all"):
            return [run.move(d, host, "all", i) for i, d in enumerate(dev)]

    out = []
    for i, b in enumerate(state):
        for k in kernels:
            with ledger.labels(kernel=k):
                with run.phase("convert"):
                    n = ops.narrow(b, run.access[k], arena=host, key=run.key(k, "N", i))
                d = run.move(n, device, k, i)
                if run.variant.converts:
                    view, full = run.convert_in(d, k, device, i, narrow=False)
                    run.compute(k, view, j_source=d, arena=device, idx=i)
                    d = run.convert_out(view, full, k, device, i)
                    d.writes = n.writes
                else:
                    run.compute(k, d, arena=device, idx=i)
                back = run.move(d, host, k, i)
                back.writes = n.writes
                with run.phase("merge"):
                    b = ops.widen_merge(back, b, arena=host, key=run.key(k, "NT", i))
        out.append(b)
    return out


def _host_side(run: _Runner, kernels, state, host, device):
    ledger = run.memory.ledger
    if run.mode is Mode.STREAMING:
        out = []
        for i, b in enumerate(state):
            for k in kernels:
                with ledger.labels(kernel=k):
                    view, full = run.convert_in(b, k, host, i)
                    d = run.move(view, device, k, i)
                    run.compute(k, d, j_source=None, arena=device, idx=i)
                    if run.variant.converts:
                        run.metrics.conversions += 1
                    back = run.move(d, host, k, i)
                    b = run.convert_out(back, full, k, host, i)
            out.append(b)
        return out

    out = []
    for i, b in enumerate(state):
        with ledger.labels(kernel="all"):
            full, _ = run.convert_in(b, "all", host, i, narrow=False)
            d = run.move(full, device, "all", i)
        for k in kernels:
            with run.phase("convert"):
                n = ops.narrow(d, run.access[k], arena=device, key=run.key(k, "N", i))
            run.compute(k, n, j_source=None, arena=device, idx=i)
            run.metrics.conversions += 1
            with run.phase("merge"):
                d = ops.widen_merge(n, d, arena=device, key=run.key(k, "NT", i))
        with ledger.labels(kernel="all"):
            back = run.move(d, host, "all", i)
            with run.phase("convert"):
                p = ops.pack(back, arena=host, key=run.key("all", "UT", i))
                if p.layout is Layout.SOA:
                    p = ops.soa_to_aos(p, arena=host, key=run.key("all", "CT", i))
        out.append(p)
    return out


def run_quadratic(
    kernel: str,
    buf_i: PackedBuffer,
    buf_j: PackedBuffer | None,
    access: KernelAccessSet,
    *,
    variant: Variant | str = Variant.CPU_SOA,
    hoist: bool = True,
    group: int = NEIGHBOURS,
    writeback: str = "deferred",
) -> tuple[PackedBuffer, RunMetrics]:
    """One quadratic kernel invocation over (i-buffer, j-buffer) on the host.

    With ``hoist`` the j-buffer is converted once, alongside the i-buffer
    (a single conversion when both are the same buffer).  Without it the
    j-buffer is converted again on every outer iteration.
    """
    variant = Variant(variant)
    if kernel not in QUADRATIC:
        raise PipelineError(f"{kernel!r} is not a quadratic kernel")
    if variant.placement != "cpu" or not variant.converts:
        raise PipelineError("run_quadratic needs a converting CPU variant (cpu-unpack or cpu-soa)")
    same = buf_j is None or buf_j is buf_i
    memory = Memory()
    run = _Runner(variant, Mode.INPLACE, {kernel: access}, memory, 0.0, group, writeback, hoist, 1)
    host = memory.host
    bi = _clone(buf_i)
    view_i, full_i = run.convert_in(bi, kernel, host, 0)
    if hoist:
        if same:
            view_j = view_i
        else:
            view_j, _ = run.convert_in(_clone(buf_j), kernel, host, 1)
            run.metrics.conversions += 1
        run.metrics.conversions += 1
        with run.phase("compute", kernel):
            apply_kernel(kernel, view_i, view_j, group=group, writeback=writeback)
    else:
        if not same:
            run.metrics.conversions += 1
        j_src = bi if same else _clone(buf_j)
        g = group
        for r in range(view_i.count):
            j_view, _ = run.convert_in(j_src, kernel, host, 1)
            run.metrics.conversions += 1
            block = slice((r // g) * g, (r // g + 1) * g)
            with run.phase("compute", kernel):
                apply_kernel(
                    kernel, view_i, j_view, group=g, group_i=1, rows_i=[r], rows_j=block, writeback=writeback
                )
    out = _clone(run.convert_out(view_i, full_i, kernel, host, 0))
    run.metrics.checksum = ops.checksum(out)
    return out, run.metrics


def parse_pipeline_config(text: str) -> dict:
    """``variant=<name> mode=<inplace|streaming> kernels=<list> order=<list>``.

    Pairs may span lines; ``#`` starts a comment.  Lists are comma separated.
    ``order`` must be a permutation of ``kernels`` when both are given.
    """
    cfg: dict = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0]
        for tok in line.split():
            if "=" not in tok:
                raise PipelineError(f"expected key=value, found {tok!r}")
            key, value = tok.split("=", 1)
            if key in ("variant", "mode", "writeback"):
                cfg[key] = value
            elif key in ("kernels", "order"):
                cfg[key] = [v for v in value.split(",") if v]
            else:
                raise PipelineError(f"unknown pipeline key {key!r}")
    if "variant" in cfg:
        try:
            Variant(cfg["variant"])
        except ValueError:
            raise PipelineError(f"unknown variant {cfg['variant']!r}") from None
    if "mode" in cfg:
        try:
            Mode(cfg["mode"])
        except ValueError:
            raise PipelineError(f"unknown mode {cfg['mode']!r}") from None
    if "kernels" in cfg and "order" in cfg and sorted(cfg["kernels"]) != sorted(cfg["order"]):
        raise PipelineError("order must list exactly the configured kernels")
    if "order" in cfg:
        cfg["kernels"] = list(cfg["order"])
    elif "kernels" in cfg:
        cfg["kernels"] = canonical_order(cfg["kernels"])
    return cfg
