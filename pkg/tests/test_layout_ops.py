import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soaforge import layout_ops as ops
from soaforge.fpcodec import encode_array, layout_for
from soaforge.layout_ops import Arena, Layout, LayoutError, Memory, Precision, TransferLedger
from soaforge.schema import FieldDecl, KernelAccessSet, RecordSchema, parse_schema


def random_state(schema, n, rng):
    out = {}
    for f in schema.fields:
        shape = (n,) if f.arity == 1 else (n, f.arity)
        if f.is_float:
            out[f.name] = rng.uniform(-100, 100, shape)
        else:
            out[f.name] = rng.integers(-(2**62), 2**62, shape)
    return out


def oracle_stream(schema, state, layout, precision, fields=None):
    """Bytes of a buffer built by concatenating lane codes one by one."""
    names = [f.name for f in schema.fields if fields is None or f.name in fields]
    n = len(next(iter(state.values())))

    def lanes(name, r):
        f = schema.field(name)
        v = np.reshape(np.asarray(state[name])[r], -1)
        if not f.is_float:
            return [(int(np.int64(x).view(np.uint64)), 64) for x in v]
        spec = f.spec
        codes = encode_array(v, spec)
        if precision is Precision.NATIVE:
            base = layout_for(spec.base_bits)
            from soaforge.fpcodec import decode_array

            codes = encode_array(decode_array(codes, spec), base)
            return [(int(c), base.total_bits) for c in codes]
        return [(int(c), spec.total_bits) for c in codes]

    if layout is Layout.AOS:
        order = [(name, r) for r in range(n) for name in names]
    else:
        order = [(name, r) for name in names for r in range(n)]
    acc, pos = 0, 0
    for name, r in order:
        for code, w in lanes(name, r):
            acc |= code << pos
            pos += w
    return acc.to_bytes((pos + 7) // 8, "little"), pos


@pytest.fixture
def small():
    return parse_schema(
        "schema s { field x : f64 x3; field id : i64; field v : f32 x3 @truncate(20);"
        " field u : f32 @truncate(12); field m : f64 @truncate(40); }"
    )


@pytest.mark.parametrize("layout", list(Layout))
@pytest.mark.parametrize("precision", list(Precision))
def test_pack_records_matches_oracle(small, rng, layout, precision):
    state = random_state(small, 5, rng)
    buf = ops.pack_records(small, state, layout, precision)
    raw, nbits = oracle_stream(small, state, layout, precision)
    assert buf.data.length_bits == nbits
    assert buf.data.tobytes() == raw


def test_lengths(schema):
    assert ops.allocate(schema, 64).data.length_bits == 64 * 704
    assert ops.record_bits(schema, Precision.NATIVE) == 704
    t = schema.with_truncation(16)
    assert ops.record_bits(t, Precision.COMPRESSED) == 480
    assert ops.record_bits(t, Precision.NATIVE) == 480  # binary16 is its own base
    t = schema.with_truncation(20)
    assert ops.record_bits(t, Precision.COMPRESSED) == 192 + 64 + 60 + 60 + 8 * 20
    assert ops.record_bits(t, Precision.NATIVE) == 704


def test_two_scalar_fields_stream_order():
    s = parse_schema("field a : f32; field b : f32;")
    buf = ops.pack_records(s, {"a": [1.0, 2.0], "b": [3.0, 4.0]}, Layout.SOA)
    got = np.frombuffer(buf.data.tobytes(), dtype=np.float32)
    assert got.tolist() == [1.0, 2.0, 3.0, 4.0]
    aos = ops.soa_to_aos(buf)
    assert np.frombuffer(aos.data.tobytes(), dtype=np.float32).tolist() == [1.0, 3.0, 2.0, 4.0]


def test_count_one_conversion_is_identity(small, rng):
    buf = ops.pack_records(small, random_state(small, 1, rng))
    assert ops.aos_to_soa(buf).data == buf.data


def test_read_write_field(small, rng):
    state = random_state(small, 7, rng)
    buf = ops.pack_records(small, state)
    np.testing.assert_array_equal(ops.read_field(buf, "x"), state["x"])
    np.testing.assert_array_equal(ops.read_field(buf, "id"), state["id"])
    assert ops.read_field(buf, "id").dtype == np.int64
    u = ops.read_field(buf, "u")
    assert np.all(np.abs(u - state["u"]) <= np.abs(state["u"]) * 2.0**-5)
    ops.write_field(buf, "u", [1.5], rows=[3])
    assert ops.read_field(buf, "u")[3] == 1.5


def test_native_store_quantizes():
    s = parse_schema("field p : f32 @truncate(17);")
    buf = ops.allocate(s, 1, precision=Precision.NATIVE)
    ops.write_field(buf, "p", [math.pi])
    assert ops.read_field(buf, "p")[0] == 3.140625
    assert ops.pack(buf).data.tobytes() == ops.pack_records(s, {"p": [math.pi]}).data.tobytes()


def test_unpack_pi_at_17():
    s = parse_schema("field p : f32 @truncate(17);")
    n = ops.unpack(ops.pack_records(s, {"p": [math.pi]}))
    assert n.precision is Precision.NATIVE
    assert np.frombuffer(n.data.tobytes(), dtype=np.float32)[0] == 3.140625


def test_unpack_without_truncation_is_copy(schema, state):
    buf = ops.pack_records(schema, state)
    assert ops.unpack(buf).data == buf.data


def test_narrow_drift_size(schema, state, access):
    buf = ops.pack_records(schema, {k: v[:64] for k, v in state.items()})
    n = ops.narrow(buf, access["drift"])
    assert n.fields == ("x", "v")
    assert n.data.length_bits == 64 * (96 + 192)
    assert n.writes == {"x"}
    assert "x,v" in n.tags()


def test_narrow_kick_slot_oracle(schema, rng, access):
    st2 = random_state(schema, 2, rng)
    buf = ops.pack_records(schema, st2)
    n = ops.narrow(buf, access["kick"])
    for name in n.fields:
        assert np.array_equal(ops.read_raw(n, name), ops.read_raw(buf, name))
    raw, _ = oracle_stream(schema, st2, Layout.AOS, Precision.COMPRESSED, set(access["kick"].fields))
    assert n.data.tobytes() == raw


def test_narrow_all_is_copy(schema, state):
    buf = ops.pack_records(schema, state)
    full = KernelAccessSet("all", frozenset(schema.names), frozenset())
    assert ops.narrow(buf, full).data == buf.data


def test_narrow_errors(schema, state, access):
    buf = ops.pack_records(schema, state)
    with pytest.raises(LayoutError):
        ops.narrow(buf, KernelAccessSet("k", frozenset({"nope"}), frozenset()))
    with pytest.raises(LayoutError):
        ops.narrow(ops.narrow(buf, access["kick"]), access["kick"])


def test_widen_merge_only_write_set_changes(schema, state, access):
    buf = ops.pack_records(schema, state)
    n = ops.narrow(buf, access["drift"])
    ops.write_field(n, "x", ops.read_field(n, "x") + 0.25)
    ops.write_field(n, "v", ops.read_field(n, "v") * 0)  # read-only field: must not leak back
    out = ops.widen_merge(n, buf)
    for name in schema.names:
        same = np.array_equal(ops.read_raw(out, name), ops.read_raw(buf, name))
        assert same == (name != "x"), name
    assert buf.data == ops.pack_records(schema, state).data


def test_widen_merge_noop_and_errors(schema, state, access):
    buf = ops.pack_records(schema, state)
    n = ops.narrow(buf, access["force"])
    assert ops.widen_merge(n, buf).data == buf.data
    with pytest.raises(LayoutError):
        ops.widen_merge(ops.narrow(buf, access["force"]), ops.pack_records(schema, {k: v[:64] for k, v in state.items()}))
    with pytest.raises(LayoutError):
        ops.widen_merge(ops.unpack(n), buf)
    other = schema.with_truncation(20)
    with pytest.raises(LayoutError):
        ops.widen_merge(n, ops.pack_records(other, state))


def test_merge_accepts_other_layout(schema, state, access):
    buf = ops.pack_records(schema, state)
    n = ops.aos_to_soa(ops.narrow(buf, access["kick"]))
    ops.write_field(n, "u", np.ones(len(state["u"])))
    out = ops.widen_merge(n, buf)
    assert out.layout is Layout.AOS
    assert np.all(ops.read_field(out, "u") == 1.0)


def test_wrong_tags(schema, state):
    buf = ops.pack_records(schema, state)
    with pytest.raises(LayoutError):
        ops.soa_to_aos(buf)
    with pytest.raises(LayoutError):
        ops.aos_to_soa(ops.aos_to_soa(buf))
    with pytest.raises(LayoutError):
        ops.pack(buf)
    with pytest.raises(LayoutError):
        ops.unpack(ops.unpack(buf))


def test_move_ledger(schema, state):
    mem = Memory()
    buf = ops.pack_records(schema, {k: v[:64] for k, v in state.items()})
    d = ops.move(buf, mem.device)
    assert d.home == "device" and d.data == buf.data
    assert mem.ledger.bytes_moved("host->device") == 64 * 704 // 8 == 5632
    back = ops.move(d, mem.host)
    assert back.data == buf.data
    assert mem.ledger.bytes_moved() == 2 * 5632
    assert mem.ledger.transfer_count == 2
    assert mem.ledger.modeled_time_s() == pytest.approx(2 * (5e-6 + 5632 / 64e9), rel=1e-15)
    with pytest.raises(LayoutError):
        ops.move(back, mem.host)


def test_move_rounds_up_bytes():
    s = parse_schema("field p : f32 @truncate(9);")
    mem = Memory()
    ops.move(ops.allocate(s, 3), mem.device)
    assert mem.ledger.bytes_moved() == math.ceil(27 / 8)


def test_ledger_formula_and_csv():
    led = TransferLedger(latency_s=1e-3, bandwidth_Bps=1e6)
    with led.labels(variant="v1", kernel="kick"):
        led.record("host->device", 5000)
        led.record("host->device", 1000)
    with led.labels(variant="v1"):
        with led.labels(kernel="drift"):
            led.record("device->host", 10)
    assert led.modeled_time_s() == pytest.approx(3e-3 + 6010 / 1e6)
    assert led.bytes_moved(kernel="kick") == 6000
    fh = io.StringIO()
    led.write_csv(fh)
    lines = fh.getvalue().splitlines()
    assert lines[0] == "variant,kernel,direction,bytes,transfers,modeled_time_s"
    assert lines[1].startswith("v1,kick,host->device,6000,2,")
    assert lines[2].startswith("v1,drift,device->host,10,1,")
    with pytest.raises(ValueError):
        TransferLedger(bandwidth_Bps=0)


def test_arena_pooling():
    a = Arena("host")
    b1 = a.allocate(800, key="k")
    b1.data[:] = 7
    b2 = a.allocate(400, key="k")
    assert a.pool_hits == 1 and b2.nbytes == 50 and not b2.data.any()
    b3 = a.allocate(1600, key="k")
    assert b3.nbytes == 200 and a.pool_bytes == 200
    a.allocate(80, key="k")
    assert a.pool_bytes == 200  # never shrinks
    a.allocate(80)
    assert a.pool_bytes == 200 and a.allocations == 5


def test_checksum_sensitive(schema, state):
    buf = ops.pack_records(schema, state)
    c = ops.checksum(buf)
    assert c == ops.checksum([ops.pack_records(schema, state)])
    buf.data.data[5] ^= 1
    assert ops.checksum(buf) != c


def test_unpack_records_round_trip(schema, state):
    buf = ops.pack_records(schema, state)
    back = ops.unpack_records(buf)
    np.testing.assert_array_equal(back["x"], state["x"])
    np.testing.assert_array_equal(back["id"], state["id"])
    with pytest.raises(LayoutError):
        ops.pack_records(schema, {"nope": [1.0]})
    with pytest.raises(LayoutError):
        ops.pack_records(schema, {"u": [1.0], "m": [1.0, 2.0]})


@st.composite
def buffers(draw):
    nf = draw(st.integers(1, 6))
    fields = []
    for i in range(nf):
        base = draw(st.sampled_from(["f32", "f64", "i64"]))
        trunc = None if base == "i64" else draw(st.one_of(st.none(), st.integers(7, 64)))
        fields.append(FieldDecl(f"f{i}", base, draw(st.sampled_from([1, 3])), trunc))
    schema = RecordSchema("r", tuple(fields))
    n = draw(st.integers(1, 40))
    seed = draw(st.integers(0, 2**32 - 1))
    return ops.pack_records(schema, random_state(schema, n, np.random.default_rng(seed)))


@given(buffers(), st.data())
def test_lossless_identities(buf, data):
    assert ops.soa_to_aos(ops.aos_to_soa(buf)).data == buf.data
    assert ops.pack(ops.unpack(buf)).data == buf.data
    names = data.draw(st.sets(st.sampled_from(buf.schema.names), min_size=1))
    empty = KernelAccessSet("k", frozenset(names), frozenset())
    assert ops.widen_merge(ops.narrow(buf, empty), buf).data == buf.data
    # the full preamble and epilogue around a kernel that writes nothing
    view = ops.unpack(ops.narrow(ops.aos_to_soa(buf), empty))
    back = ops.soa_to_aos(ops.widen_merge(ops.pack(view), ops.aos_to_soa(buf)))
    assert back.data == buf.data


@given(buffers())
def test_unpack_pack_idempotent_on_native(buf):
    n = ops.unpack(buf)
    once = ops.unpack(ops.pack(n))
    assert once.data == n.data
