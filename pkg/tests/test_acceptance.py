"""Acceptance suite: one line per criterion, printed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from oracles import naive

from soaforge import layout_ops as ops
from soaforge.fpcodec import MAX_TOTAL_BITS, MIN_TOTAL_BITS, encode_array, layout_for, quantize_array
from soaforge.layout_ops import Memory, Precision
from soaforge.particles import make_particles
from soaforge.pipelines import Mode, Variant, run_variant
from soaforge.schema import FieldDecl, KernelAccessSet, RecordSchema
from soaforge.sph import apply_kernel
from soaforge.study import DEFAULT_SWEEP, truncation_study

RESULTS = {}
THREADS = os.cpu_count() or 1


@contextmanager
def criterion(n, title, budget_s=None):
    t0 = time.perf_counter()
    note = {}
    try:
        yield note
        elapsed = time.perf_counter() - t0
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.2f} s, budget {budget_s} s"
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        RESULTS[n] = f"[{n}] FAIL {title} ({elapsed:.2f} s): {exc}".splitlines()[0]
        print(RESULTS[n])
        raise
    detail = f" {note['detail']}" if "detail" in note else ""
    RESULTS[n] = f"[{n}] PASS {title} ({elapsed:.2f} s){detail}"
    print(RESULTS[n])


def test_1_format_table():
    with criterion(1, "sign/exponent/mantissa split", 1.0):
        for t, want in ((64, (1, 11, 52)), (32, (1, 8, 23)), (16, (1, 5, 10))):
            s = layout_for(t)
            assert (s.sign_bits, s.exponent_bits, s.mantissa_bits) == want
        for t in range(MIN_TOTAL_BITS, MAX_TOTAL_BITS + 1):
            s = layout_for(t)
            assert s.exponent_bits == (11 if t >= 33 else 8 if t >= 17 else 5)
            assert s.sign_bits + s.exponent_bits + s.mantissa_bits == t


def test_2_codec_bound():
    with criterion(2, "quantization error bound at every T", 5.0) as note:
        rng = np.random.default_rng(2)
        mag = np.exp(rng.uniform(np.log(2.0**-14), np.log(65504.0), 10**6))
        x = mag * rng.choice([-1.0, 1.0], 10**6)
        worst = 0.0
        for t in range(MIN_TOTAL_BITS, MAX_TOTAL_BITS + 1):
            s = layout_for(t)
            rel = np.abs(quantize_array(x, s) - x) / np.abs(x)
            bound = 2.0 ** (1 - s.mantissa_bits)
            assert rel.max() <= bound, f"T={t}"
            worst = max(worst, rel.max() / bound)
        assert np.array_equal(encode_array(x, layout_for(64)), x.view(np.uint64))
        assert np.array_equal(quantize_array(x, layout_for(64)).view(np.uint64), x.view(np.uint64))
        note["detail"] = f"max error/bound = {worst:.3f}"


def random_buffer(rng):
    fields = []
    for i in range(rng.integers(1, 9)):
        base = str(rng.choice(["f32", "f64", "i64"]))
        trunc = None if base == "i64" or rng.random() < 0.3 else int(rng.integers(7, 65))
        fields.append(FieldDecl(f"f{i}", base, int(rng.choice([1, 3])), trunc))
    schema = RecordSchema("r", tuple(fields))
    n = int(rng.integers(1, 65))
    state = {}
    for f in fields:
        shape = (n,) if f.arity == 1 else (n, 3)
        if f.is_float:
            state[f.name] = rng.standard_normal(shape) * 10.0 ** rng.integers(-3, 4)
        else:
            state[f.name] = rng.integers(-(2**63), 2**63 - 1, shape)
    return ops.pack_records(schema, state)


def test_3_lossless_operators():
    with criterion(3, "lossless operator identities on 1000 random schemas", 10.0):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            buf = random_buffer(rng)
            assert ops.soa_to_aos(ops.aos_to_soa(buf)).data == buf.data
            k = int(rng.integers(1, len(buf.schema.names) + 1))
            names = frozenset(rng.choice(buf.schema.names, k, replace=False).tolist())
            empty = KernelAccessSet("probe", names, frozenset())
            assert ops.widen_merge(ops.narrow(buf, empty), buf).data == buf.data
            assert ops.pack(ops.unpack(buf)).data == buf.data


def test_4_pipeline_universality(schema, access):
    with criterion(4, "8 variants x 2 modes agree bit for bit", 30.0) as note:
        st = make_particles(64 * 64, 4)
        for t in (64, 32, 16):
            s = schema.with_truncation(t, exclude=())
            bufs = [ops.pack_records(s, {k: v[i * 64 : (i + 1) * 64] for k, v in st.items()}) for i in range(64)]
            sums = {
                run_variant(v, m, ["density", "force", "kick", "drift"], bufs, access, writeback="deferred")[1].checksum
                for v, m in itertools.product(Variant, Mode)
            }
            assert len(sums) == 1, f"T={t}: {len(sums)} distinct checksums"
        note["detail"] = "T in {64, 32, 16}, 64 buffers x 64 particles"


def test_5_oracle_equivalence(schema):
    with criterion(5, "density and force equal the naive double loop", 5.0):
        native = schema.widened()
        for seed in range(100):
            st = make_particles(64, 500 + seed)
            rho, P, acc, du = naive(st)
            buf = ops.pack_records(native, st)
            apply_kernel("density", buf)
            assert np.array_equal(ops.read_field(buf, "rho"), rho), seed
            ops.write_field(buf, "P", P)
            apply_kernel("force", buf)
            assert np.array_equal(ops.read_field(buf, "a"), acc), seed
            assert np.array_equal(ops.read_field(buf, "du"), du), seed


def test_6_momentum(schema):
    with criterion(6, "momentum conserved per force pass") as note:
        native = schema.widened()
        worst = 0.0
        for seed in range(100):
            st = make_particles(64, 600 + seed)
            buf = ops.pack_records(native, st)
            apply_kernel("force", buf)
            a, m = ops.read_field(buf, "a"), st["m"]
            net = np.linalg.norm((m[:, None] * a).sum(axis=0))
            scale = np.sum(m * np.linalg.norm(a, axis=1))
            assert net <= 1e-12 * scale, seed
            worst = max(worst, net / scale)
        note["detail"] = f"worst |sum m a| / sum m|a| = {worst:.2e}"


def test_7_truncation_study(schema):
    with criterion(7, "truncation study over 65536 particles", 120.0) as note:
        st = make_particles(65536, 7)
        rows = {r.total_bits: r.rmse_rel for r in truncation_study(schema, st, DEFAULT_SWEEP, threads=THREADS)}
        assert rows[64] == 0.0
        for t in (56,):
            assert rows[t] <= 1e-12, f"T={t}: {rows[t]:.3e}"
        assert rows[32] < rows[33], f"rmse(32)={rows[32]:.3e} rmse(33)={rows[33]:.3e}"
        for hi, lo in ((56, 48), (48, 40)):
            assert rows[lo] * 2 >= rows[hi], f"rmse fell from T={hi} to T={lo}"
        note["detail"] = f"rmse(56)={rows[56]:.2e} rmse(33)={rows[33]:.2e} rmse(32)={rows[32]:.2e}"


def test_8_ledger_exactness(schema, access):
    with criterion(8, "ledger bytes equal schema width sums", 5.0) as note:
        st = make_particles(4096, 8)
        buf = ops.pack_records(schema, st)
        _, met = run_variant("dev-unpack", "streaming", ["kick"], buf, access)
        assert met.ledger["bytes"]["host->device"] == 4096 * (96 + 96 + 32 + 32) // 8 == 131072
        checked = 0
        small = make_particles(256, 9)
        for s in (schema, schema.with_truncation(20), schema.with_truncation(40, exclude=())):
            b = ops.pack_records(s, small)
            for v in (v for v in Variant if v.placement != "cpu"):
                prec = Precision.COMPRESSED if v.placement == "device" else Precision.NATIVE
                full = 256 * ops.record_bits(s, prec) // 8
                for k in ["density", "force", "kick", "drift", "identity"]:
                    mem = Memory()
                    run_variant(v, "streaming", [k], b, access, memory=mem)
                    fields = s.names if k == "identity" else access[k].fields
                    want = 256 * ops.record_bits(s, prec, fields) // 8
                    for d in ("host->device", "device->host"):
                        assert mem.ledger.bytes_moved(d) == want
                    _, mi = run_variant(v, "inplace", [k], b, access)
                    assert mi.ledger["bytes"]["host->device"] == full
                    assert want <= full and (want == full) == (set(fields) == set(s.names))
                    checked += 1
        note["detail"] = f"{checked} variant/kernel/schema configurations"


def test_9_hardware_speedups_report_only(schema, access):
    """Interconnect speedups need real accelerators; report CPU-side timings only."""
    bufs = [ops.pack_records(schema, make_particles(64, s)) for s in range(16)]
    parts = []
    for v, m in ((Variant.CPU_BASELINE, Mode.INPLACE), (Variant.DEV_SOA, Mode.INPLACE), (Variant.DEV_SOA, Mode.STREAMING)):
        _, met = run_variant(v, m, ["density", "force", "kick", "drift"], bufs, access)
        parts.append(f"{v.value}/{m.value} {met.total_s * 1e3:.1f} ms (modeled transfer {met.ledger['modeled_time_s'] * 1e6:.1f} us)")
    RESULTS[9] = "[9] REPORT hardware speedups not reproducible here; " + "; ".join(parts)
    print(RESULTS[9])
