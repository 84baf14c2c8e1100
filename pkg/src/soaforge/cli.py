"""Command-line front end: benchmarks, truncation study and self-validation.

Every subcommand writes a CSV (``--out``, default stdout) whose first line is
``# soaforge v<version>`` and prints a summary table.  Transfer costs come
from a synthetic latency/bandwidth model, not from a real interconnect.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from soaforge import __version__, _backend
from soaforge import layout_ops as ops
from soaforge.bitpack import BitBuffer, hexdump
from soaforge.fpcodec import MAX_TOTAL_BITS, MIN_TOTAL_BITS, decode_array, encode_array, layout_for, quantize_array
from soaforge.layout_ops import Layout, Memory, Precision
from soaforge.particles import load_particles_csv, make_particles
from soaforge.pipelines import Mode, PipelineError, Variant, parse_pipeline_config, run_variant
from soaforge.schema import KernelAccessSet, RecordSchema, SchemaError, builtin_access_sets, builtin_schema, load_schema
from soaforge.sph import KERNEL_ORDER, apply_kernel, identity_access, reference_density, reference_force
from soaforge.study import DEFAULT_SWEEP, truncation_study

__all__ = [
    "RunConfig",
    "build_config",
    "cmd_bench_transform",
    "cmd_bench_kernels",
    "cmd_bench_pipeline",
    "cmd_bench_backends",
    "cmd_study_truncation",
    "cmd_validate",
    "main",
]

FAULTS = ("codec", "bitpack", "layout", "oracle", "momentum", "variants")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schema: RecordSchema
    access: dict[str, KernelAccessSet]
    state: dict
    buffer_size: int = 64
    seed: int = 0
    precision: list[int] = field(default_factory=lambda: [32])
    variants: list[Variant] = field(default_factory=lambda: list(Variant))
    modes: list[Mode] = field(default_factory=lambda: list(Mode))
    kernels: list[str] = field(default_factory=lambda: list(KERNEL_ORDER))
    threads: int = 1
    latency: float = 5e-6
    bandwidth: float = 64e9
    writeback: str = "deferred"
    dt: float = 1e-3
    repeats: int = 3

    @property
    def particles(self) -> int:
        return len(self.state["x"])

    def schema_at(self, total_bits: int) -> RecordSchema:
        """Every floating field stored in ``total_bits`` bits."""
        return self.schema.with_truncation(total_bits, exclude=())

    def buffers(self, schema: RecordSchema, layout=Layout.AOS, precision=Precision.COMPRESSED):
        n = self.buffer_size
        return [
            ops.pack_records(schema, {k: v[i : i + n] for k, v in self.state.items()}, layout, precision)
            for i in range(0, self.particles, n)
        ]

    def memory(self) -> Memory:
        return Memory(self.latency, self.bandwidth)


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma separated list of integers, got {text!r}") from None


def _precisions(text: str | None, default) -> list[int]:
    vals = list(default) if text is None else _int_list(text, "--precision")
    bad = [t for t in vals if not MIN_TOTAL_BITS <= t <= MAX_TOTAL_BITS]
    if bad or not vals:
        raise ConfigError(f"--precision values must lie in [{MIN_TOTAL_BITS}, {MAX_TOTAL_BITS}], got {vals}")
    return vals


def build_config(args, default_precision=(32,)) -> RunConfig:
    if args.schema:
        schema, sets = load_schema(args.schema)
    else:
        schema, sets = builtin_schema(), builtin_access_sets()
    access = {a.kernel: a for a in sets}
    access.setdefault("identity", identity_access(schema))

    pipe = {}
    if getattr(args, "config", None):
        pipe = parse_pipeline_config(Path(args.config).read_text())
    if args.buffer_size <= 0:
        raise ConfigError("--buffer-size must be positive")
    particles = args.particles
    if particles is not None and not particles.isdigit():
        state = load_particles_csv(particles, args.dt, args.buffer_size)
    else:
        count = int(particles) if particles else 4096
        if count % args.buffer_size:
            raise ConfigError(f"--buffer-size {args.buffer_size} does not divide the particle count {count}")
        state = make_particles(count, args.seed, args.dt, args.buffer_size)
    state = {k: v for k, v in state.items() if k in schema.names}

    def pick(flag, key, enum, default):
        raw = flag.split(",") if flag else ([pipe[key]] if key in pipe else None)
        if raw is None:
            return default
        try:
            return [enum(r) for r in raw]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    kernels = args.kernels.split(",") if getattr(args, "kernels", None) else pipe.get("kernels", list(KERNEL_ORDER))
    for k in kernels:
        if k not in access:
            raise ConfigError(f"no access set for kernel {k!r}")
    return RunConfig(
        schema=schema,
        access=access,
        state=state,
        buffer_size=args.buffer_size,
        seed=args.seed,
        precision=_precisions(args.precision, default_precision),
        variants=pick(args.variant, "variant", Variant, list(Variant)),
        modes=pick(args.mode, "mode", Mode, list(Mode)),
        kernels=list(kernels),
        threads=args.threads if args.threads else (os.cpu_count() or 1),
        latency=args.latency,
        bandwidth=args.bandwidth,
        writeback=args.writeback or pipe.get("writeback", "deferred"),
        dt=args.dt,
        repeats=args.repeats,
    )


def _best(fn, repeats):
    best, out = float("inf"), None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


# -- benchmarks -------------------------------------------------------------------


def cmd_bench_transform(cfg: RunConfig) -> list[dict]:
    """Conversion cost with the conversion placed on the host or on the device.

    Host: C, N, U on the host, then move the native view.  Device: N on the
    host, move the compressed view, then C and U in the device arena.
    """
    rows = []
    for t in cfg.precision:
        sch = cfg.schema_at(t)
        bufs = cfg.buffers(sch)
        for k in [k for k in cfg.kernels if k != "identity"] + ["Full"]:
            acc = cfg.access["identity"] if k == "Full" else cfg.access[k]

            def host_side(mem):
                def conv():
                    return [ops.unpack(ops.narrow(ops.aos_to_soa(b), acc)) for b in bufs]

                conv_s, views = _best(conv, cfg.repeats)
                for v in views:
                    ops.move(v, mem.device)
                return conv_s

            def device_side(mem):
                narrow_s, narrowed = _best(lambda: [ops.narrow(b, acc) for b in bufs], cfg.repeats)
                dev = [ops.move(n, mem.device) for n in narrowed]
                conv_s, _ = _best(
                    lambda: [ops.unpack(ops.aos_to_soa(d, arena=mem.device), arena=mem.device) for d in dev],
                    cfg.repeats,
                )
                return narrow_s + conv_s

            measured = {}
            for placement, fn in (("host", host_side), ("device", device_side)):
                mem = cfg.memory()
                conv_s = fn(mem)
                led = mem.ledger
                measured[placement] = dict(
                    kernel=k,
                    placement=placement,
                    precision=t,
                    particles=cfg.particles,
                    fields=len(acc.fields),
                    convert_s=conv_s,
                    bytes_moved=led.bytes_moved("host->device"),
                    modeled_transfer_s=led.modeled_time_s(),
                )
            total = {p: m["convert_s"] + m["modeled_transfer_s"] for p, m in measured.items()}
            ratio = total["host"] / total["device"] if total["device"] > 0 else float("nan")
            for m in measured.values():
                m["ratio"] = ratio
                rows.append(m)
    return rows


def cmd_bench_kernels(cfg: RunConfig) -> list[dict]:
    """Kernel compute time on native AoS and SoA buffers, nothing else timed."""
    rows = []
    kernels = list(dict.fromkeys(list(cfg.kernels) + ["identity"]))
    for t in cfg.precision:
        sch = cfg.schema_at(t)
        for k in kernels:
            aos_s = None
            for layout in (Layout.AOS, Layout.SOA):
                base = cfg.buffers(sch, layout, Precision.NATIVE)

                def run():
                    bufs = [ops.PackedBuffer(b.schema, b.count, b.layout, b.precision, b.fields, b.data.copy()) for b in base]
                    t0 = time.perf_counter()
                    for b in bufs:
                        apply_kernel(k, b, dt=cfg.dt, group=cfg.buffer_size, writeback=cfg.writeback, threads=cfg.threads)
                    return time.perf_counter() - t0, bufs

                best = float("inf")
                for _ in range(max(1, cfg.repeats)):
                    s, bufs = run()
                    best = min(best, s)
                final = [ops.soa_to_aos(b) if b.layout is Layout.SOA else b for b in bufs]
                if layout is Layout.AOS:
                    aos_s = best
                rows.append(
                    dict(
                        kernel=k,
                        layout=layout.value,
                        precision=t,
                        particles=cfg.particles,
                        compute_s=best,
                        speedup_vs_AoS=aos_s / best if best > 0 else float("nan"),
                        checksum=ops.checksum(final)[:16],
                    )
                )
    return rows


def cmd_bench_pipeline(cfg: RunConfig) -> list[dict]:
    rows = []
    for t in cfg.precision:
        bufs = cfg.buffers(cfg.schema_at(t))
        for v in cfg.variants:
            for m in cfg.modes:
                mem = cfg.memory()
                _, met = run_variant(
                    v, m, cfg.kernels, bufs, cfg.access, memory=mem, dt=cfg.dt,
                    group=cfg.buffer_size, writeback=cfg.writeback, threads=cfg.threads,
                )
                led = mem.ledger
                row = dict(
                    variant=v.value,
                    mode=m.value,
                    precision=t,
                    particles=cfg.particles,
                    total_s=met.total_s,
                    convert_s=met.convert_s,
                    move_s=met.move_s,
                    compute_s=met.compute_s,
                    merge_s=met.merge_s,
                    bytes_h2d=led.bytes_moved("host->device"),
                    bytes_d2h=led.bytes_moved("device->host"),
                    transfers=led.transfer_count,
                    modeled_transfer_s=led.modeled_time_s(),
                    checksum=met.checksum[:16],
                )
                shares = met.kernel_shares()
                for k in cfg.kernels:
                    row[f"share_{k}"] = shares.get(k, 0.0)
                rows.append(row)
    return rows


def cmd_bench_backends(cfg: RunConfig) -> list[dict]:
    """Time the compiled and numpy kernels on identical inputs."""
    n = cfg.particles
    g = cfg.buffer_size
    st = {k: np.ascontiguousarray(cfg.state[k], dtype=np.float64) for k in ("x", "v", "m", "h", "rho", "P")}
    rng = np.random.default_rng(cfg.seed)
    widths = (7, 17, 32, 53, 64)
    data = BitBuffer(n * 64 * len(widths))
    rows = []
    backends = [b for b in (_backend.native, _backend.purepy) if b is not None]
    for impl in backends:
        cases = {
            "density": lambda: impl.density(st["x"], st["h"], st["x"], st["m"], st["h"], g, g),
            "force": lambda: impl.force(
                st["x"], st["v"], st["h"], st["rho"], st["P"],
                st["x"], st["v"], st["m"], st["h"], st["rho"], st["P"], g, g,
            ),
        }
        for w in widths:
            offs = np.sort(rng.choice(data.length_bits - 64, n, replace=False)).astype(np.int64)
            cases[f"gather_w{w}"] = lambda offs=offs, w=w: impl.gather_bits(data.data, offs, w)
        for name, fn in cases.items():
            s, _ = _best(fn, cfg.repeats)
            rows.append(dict(backend=impl.NAME, case=name, particles=n, seconds=s))
    by_case = {}
    for r in rows:
        by_case.setdefault(r["case"], {})[r["backend"]] = r["seconds"]
    for r in rows:
        base = by_case[r["case"]].get("numpy")
        r["speedup_vs_numpy"] = base / r["seconds"] if base and r["seconds"] > 0 else float("nan")
    return rows


def cmd_study_truncation(cfg: RunConfig) -> list[dict]:
    rows = truncation_study(cfg.schema, cfg.state, cfg.precision, group=cfg.buffer_size, threads=cfg.threads)
    return [dict(T=r.total_bits, rmse_rel=r.rmse_rel, max_rel=r.max_rel, particles=cfg.particles) for r in rows]


# -- validation ------------------------------------------------------------------


def _flip(buf: ops.PackedBuffer, bit: int = 3) -> None:
    buf.data.data[bit >> 3] ^= np.uint8(1 << (bit & 7))


def cmd_validate(cfg: RunConfig, fault: str | None = None) -> list[tuple[str, bool, str]]:
    """Run the invariant suite; ``fault`` corrupts the data of one check."""
    if fault is not None and fault not in FAULTS:
        raise ConfigError(f"unknown fault {fault!r}; choose from {', '.join(FAULTS)}")
    rng = np.random.default_rng(cfg.seed)
    results = []

    def check(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed invariant too
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))

    def codec():
        vals = rng.uniform(-1e4, 1e4, 4096)
        for t in range(MIN_TOTAL_BITS, MAX_TOTAL_BITS + 1):
            spec = layout_for(t)
            codes = encode_array(vals, spec)
            q = decode_array(codes, spec)
            if fault == "codec":
                codes = codes ^ np.uint64(1)
            if not np.array_equal(encode_array(q, spec), codes):
                return False, f"T={t}: encode(decode(c)) != c"
            if not np.array_equal(quantize_array(q, spec), q):
                return False, f"T={t}: quantize is not idempotent"
        return True, f"T={MIN_TOTAL_BITS}..{MAX_TOTAL_BITS}"

    def bitpack():
        for w in (1, 7, 13, 32, 53, 64):
            n = 257
            buf = BitBuffer(n * w + 11)
            offs = 11 + np.arange(n, dtype=np.int64) * w
            vals = rng.integers(0, 2**64, n, dtype=np.uint64, endpoint=False) & np.uint64((1 << w) - 1)
            buf.scatter(offs, w, vals)
            if fault == "bitpack":
                buf.data[2] ^= 0x10
            if not np.array_equal(buf.gather(offs, w), vals):
                return False, f"width {w}"
        return True, "widths 1..64"

    def layout():
        for t in cfg.precision:
            buf = cfg.buffers(cfg.schema_at(t))[0]
            soa = ops.aos_to_soa(buf)
            if fault == "layout":
                _flip(soa)
            if ops.soa_to_aos(soa).data != buf.data:
                return False, f"T={t}: AoS -> SoA -> AoS"
            if ops.pack(ops.unpack(buf)).data != buf.data:
                return False, f"T={t}: pack(unpack)"
            empty = KernelAccessSet("probe", frozenset(buf.schema.names[:2]), frozenset())
            if ops.widen_merge(ops.narrow(buf, empty), buf).data != buf.data:
                return False, f"T={t}: widen_merge(narrow) with no writes"
        return True, "round trips bit-exact"

    native = cfg.schema.widened()
    g = cfg.buffer_size
    first = {k: v[:g] for k, v in cfg.state.items()}

    def oracle():
        buf = ops.pack_records(native, first)
        if fault == "oracle":
            ops.write_field(buf, "h", ops.read_field(buf, "h") * 1.001)
        apply_kernel("density", buf, group=g)
        if not np.array_equal(ops.read_field(buf, "rho"), reference_density(first, g)):
            return False, "density differs from the loop reference"
        ref_state = dict(first, rho=ops.read_field(buf, "rho"))
        apply_kernel("force", buf, group=g)
        a_ref, du_ref = reference_force(ref_state, g)
        if not (np.array_equal(ops.read_field(buf, "a"), a_ref) and np.array_equal(ops.read_field(buf, "du"), du_ref)):
            return False, "force differs from the loop reference"
        return True, f"{g} particles"

    def momentum():
        buf = ops.pack_records(native, first)
        view_j = buf
        if fault == "momentum":
            view_j = ops.pack_records(native, dict(first, m=first["m"] * np.linspace(1, 2, g)))
        apply_kernel("force", buf, view_j, group=g)
        a, m = ops.read_field(buf, "a"), first["m"]
        net = np.linalg.norm((m[:, None] * a).sum(axis=0))
        scale = np.sum(m * np.linalg.norm(a, axis=1))
        return net <= 1e-12 * scale, f"|sum m a| = {net:.3e}, sum m|a| = {scale:.3e}"

    def variants():
        bufs = cfg.buffers(cfg.schema_at(cfg.precision[0]))[: max(1, 256 // g)]
        sums = {}
        for v in Variant:
            for m in Mode:
                out, _ = run_variant(v, m, cfg.kernels, bufs, cfg.access, dt=cfg.dt, group=g)
                if fault == "variants" and (v, m) == (Variant.DEV_SOA, Mode.STREAMING):
                    _flip(out[-1], out[-1].data.length_bits - 1)
                sums[(v.value, m.value)] = ops.checksum(out)
        distinct = set(sums.values())
        if len(distinct) != 1:
            odd = [f"{v}/{m}" for (v, m), s in sums.items() if s != sums[("cpu-baseline", "inplace")]]
            return False, f"checksums differ for {', '.join(odd)}"
        return True, f"{len(sums)} variant/mode runs agree"

    for name, fn in zip(FAULTS, (codec, bitpack, layout, oracle, momentum, variants)):
        check(name, fn)
    return results


# -- output ----------------------------------------------------------------------


def write_csv(rows: list[dict], out) -> None:
    out.write(f"# soaforge v{__version__}\n")
    if not rows:
        return
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def summary_table(rows: list[dict], max_cols: int = 10) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])[:max_cols]

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    cells = [cols] + [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _emit(rows, args, title):
    if args.out and args.out != "-":
        try:
            with open(args.out, "w", newline="") as fh:
                write_csv(rows, fh)
        except OSError as exc:
            raise ConfigError(f"cannot write {args.out}: {exc.strerror}") from None
        print(f"{title} ({len(rows)} rows) -> {args.out}")
        print(summary_table(rows), end="")
    else:
        buf = io.StringIO()
        write_csv(rows, buf)
        sys.stdout.write(buf.getvalue())


# -- argument parsing ------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--schema", help="schema file (.prec); default: built-in particle schema")
    p.add_argument("--particles", help="particle count, or a CSV file with id,x0,x1,x2,v0,v1,v2,u,m,h")
    p.add_argument("--buffer-size", type=int, default=64, help="particles per buffer (default 64)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", help="comma separated storage widths T in [7, 64]")
    p.add_argument("--variant", help="comma separated pipeline variants")
    p.add_argument("--mode", help="comma separated modes (inplace, streaming)")
    p.add_argument("--kernels", help="comma separated kernels in execution order")
    p.add_argument("--config", help="pipeline configuration file")
    p.add_argument("--threads", type=int, default=0, help="kernel threads (default: all cores)")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.add_argument("--latency", type=float, default=5e-6, help="modeled transfer latency in s")
    p.add_argument("--bandwidth", type=float, default=64e9, help="modeled bandwidth in bytes/s")
    p.add_argument("--writeback", choices=("deferred", "per-access"))
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--repeats", type=int, default=3, help="timing repetitions (best is kept)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soaforge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"soaforge {__version__} ({_backend.NAME} backend)")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="benchmarks")
    bsub = bench.add_subparsers(dest="which", required=True)
    for name, hlp in (
        ("transform", "conversion cost, host vs device placement"),
        ("kernels", "kernel compute time, AoS vs SoA"),
        ("pipeline", "whole timestep for each variant and mode"),
        ("backends", "compiled vs numpy kernels"),
    ):
        _common(bsub.add_parser(name, help=hlp))

    study = sub.add_parser("study", help="accuracy studies")
    ssub = study.add_subparsers(dest="which", required=True)
    _common(ssub.add_parser("truncation", help="acceleration error vs storage width"))

    val = sub.add_parser("validate", help="run the invariant suite")
    _common(val)
    val.add_argument("--fault", choices=FAULTS, help="corrupt the data of one check")
    val.add_argument("--dump", help="write a hex dump of the first packed buffer ('-' for stdout)")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = build_config(args)
            if args.dump:
                text = hexdump(cfg.buffers(cfg.schema_at(cfg.precision[0]))[0].data)
                if args.dump == "-":
                    sys.stdout.write(text)
                else:
                    Path(args.dump).write_text(text)
            results = cmd_validate(cfg, args.fault)
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            failed = [n for n, ok, _ in results if not ok]
            if failed:
                print(f"validate: failed invariants: {', '.join(failed)}", file=sys.stderr)
                return 1
            return 0
        if args.command == "study":
            cfg = build_config(args, DEFAULT_SWEEP)
            _emit(cmd_study_truncation(cfg), args, "truncation study")
            return 0
        cfg = build_config(args)
        fn = {
            "transform": cmd_bench_transform,
            "kernels": cmd_bench_kernels,
            "pipeline": cmd_bench_pipeline,
            "backends": cmd_bench_backends,
        }[args.which]
        _emit(fn(cfg), args, f"bench {args.which}")
        return 0
    except (ConfigError, PipelineError, SchemaError, ValueError, OSError) as exc:
        print(f"soaforge: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
