"""SPH workload: cubic-spline kernel, density, force, kick and drift.

The pair kernels come from :mod:`soaforge._backend`.  ``call_linear`` and
``call_quadratic`` are the literal per-particle loop drivers; the reference
routines built on them serve as the slow cross-check for the fast path.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Mapping, MutableMapping

import numpy as np

from soaforge import _backend
from soaforge.fpcodec import quantize_array
from soaforge.layout_ops import PackedBuffer, read_field, write_field
from soaforge.schema import KernelAccessSet, RecordSchema

__all__ = [
    "GAMMA",
    "SIGMA",
    "NEIGHBOURS",
    "DegenerateStateError",
    "w",
    "dw_dr",
    "grad_w",
    "eos",
    "density",
    "force",
    "kick",
    "drift",
    "call_linear",
    "call_quadratic",
    "reference_density",
    "reference_force",
    "apply_kernel",
    "identity_access",
    "QUADRATIC",
    "LINEAR",
    "KERNEL_ORDER",
]

GAMMA = 5.0 / 3.0
SIGMA = 1.0 / math.pi
NEIGHBOURS = 64

QUADRATIC = ("density", "force")
LINEAR = ("kick", "drift", "identity")
KERNEL_ORDER = ("density", "force", "kick", "drift")


class DegenerateStateError(ValueError):
    """A particle state the equations cannot be evaluated on (e.g. rho = 0)."""


def _wq(q):
    t = 2.0 - q
    return np.where(
        q < 1.0, 1.0 - 1.5 * q * q + 0.75 * q * q * q, np.where(q < 2.0, 0.25 * t * t * t, 0.0)
    )


def w(r, h):
    """Cubic spline M4 with support 2h, normalised in 3D."""
    r = np.asarray(r, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    q = r / h
    out = SIGMA / (h * h * h) * _wq(q)
    return float(out) if out.ndim == 0 else out


def dw_dr(r, h):
    r = np.asarray(r, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    q = r / h
    t = 2.0 - q
    dq = np.where(q < 1.0, -3.0 * q + 2.25 * q * q, np.where(q < 2.0, -0.75 * t * t, 0.0))
    out = SIGMA / (h * h * h * h) * dq
    return float(out) if out.ndim == 0 else out


def grad_w(r_vec, h):
    """dW/dr * r_vec / r; zero at r = 0."""
    r_vec = np.asarray(r_vec, dtype=np.float64)
    r = np.sqrt(np.sum(r_vec * r_vec, axis=-1))
    d = np.asarray(dw_dr(r, h))
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(r > 0.0, d / r, 0.0)
    return f[..., None] * r_vec


def eos(rho, u):
    """Ideal gas: P = (gamma - 1) rho u, cs = sqrt(gamma P / rho)."""
    rho = np.asarray(rho, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if np.any(rho <= 0.0):
        raise DegenerateStateError("equation of state needs rho > 0")
    P = (GAMMA - 1.0) * rho * u
    cs = np.sqrt(GAMMA * P / rho)
    if P.ndim == 0:
        return float(P), float(cs)
    return P, cs


# -- array kernels ------------------------------------------------------------


def _col(state, name):
    return np.ascontiguousarray(state[name], dtype=np.float64)


def density(i: int, neighbours: Mapping[str, np.ndarray]) -> float:
    """Density of particle ``i`` summed over every record in ``neighbours`` (self included)."""
    x = _col(neighbours, "x")
    h = _col(neighbours, "h")
    rho = _backend.impl.density(x[i : i + 1], h[i : i + 1], x, _col(neighbours, "m"), h, 1, len(x))
    return float(rho[0])


def force(i: int, neighbours: Mapping[str, np.ndarray]) -> tuple[np.ndarray, float]:
    """Acceleration and du/dt of particle ``i``; needs current rho and P."""
    s = {k: _col(neighbours, k) for k in ("x", "v", "m", "h", "rho", "P")}
    if np.any(s["rho"] == 0.0):
        raise DegenerateStateError("force needs rho > 0 for every particle")
    sl = slice(i, i + 1)
    a, du = _backend.impl.force(
        s["x"][sl], s["v"][sl], s["h"][sl], s["rho"][sl], s["P"][sl],
        s["x"], s["v"], s["m"], s["h"], s["rho"], s["P"], 1, len(s["x"]),
    )
    return a[0], float(du[0])


def kick(p: Mapping[str, np.ndarray], dt: float) -> dict:
    """v += a dt, u += du dt (u clamped at zero); returns an updated copy."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    out = dict(p)
    out["v"] = np.asarray(p["v"], dtype=np.float64) + np.asarray(p["a"], dtype=np.float64) * dt
    out["u"] = np.maximum(np.asarray(p["u"], dtype=np.float64) + np.asarray(p["du"], dtype=np.float64) * dt, 0.0)
    return out


def drift(p: Mapping[str, np.ndarray], dt: float) -> dict:
    """x += v dt; returns an updated copy."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    out = dict(p)
    out["x"] = np.asarray(p["x"], dtype=np.float64) + np.asarray(p["v"], dtype=np.float64) * dt
    return out


# -- literal loop drivers and the slow reference ----------------------------


def call_linear(kernel: Callable, particles: Iterable) -> None:
    for p_i in particles:
        kernel(p_i)


def call_quadratic(kernel: Callable, particles_i: Iterable, particles_j) -> None:
    for p_i in particles_i:
        for p_j in particles_j:
            kernel(p_i, p_j)


def _pair_terms(p_i, p_j):
    dx = p_i["x"][0] - p_j["x"][0]
    dy = p_i["x"][1] - p_j["x"][1]
    dz = p_i["x"][2] - p_j["x"][2]
    r = math.sqrt(dx * dx + dy * dy + dz * dz)
    hij = 0.5 * (p_i["h"] + p_j["h"])
    q = r / hij
    h3 = hij * hij * hij
    h4 = h3 * hij
    t = 2.0 - q
    if q < 1.0:
        wq = 1.0 - 1.5 * q * q + 0.75 * q * q * q
        dq = -3.0 * q + 2.25 * q * q
    elif q < 2.0:
        wq = 0.25 * t * t * t
        dq = -0.75 * t * t
    else:
        wq = dq = 0.0
    f = (SIGMA / h4 * dq) / r if r > 0.0 else 0.0
    return (dx, dy, dz), SIGMA / h3 * wq, f


def density_pair(p_i: MutableMapping, p_j: Mapping) -> None:
    _, wij, _ = _pair_terms(p_i, p_j)
    p_i["rho"] = p_i["rho"] + p_j["m"] * wij


def force_pair(p_i: MutableMapping, p_j: Mapping) -> None:
    (dx, dy, dz), _, f = _pair_terms(p_i, p_j)
    gx, gy, gz = f * dx, f * dy, f * dz
    faci = p_i["P"] / (p_i["rho"] * p_i["rho"])
    fac = p_j["m"] * (faci + p_j["P"] / (p_j["rho"] * p_j["rho"]))
    vi, vj = p_i["v"], p_j["v"]
    dot = (vi[0] - vj[0]) * gx + (vi[1] - vj[1]) * gy + (vi[2] - vj[2]) * gz
    a = p_i["a"]
    p_i["a"] = [a[0] - fac * gx, a[1] - fac * gy, a[2] - fac * gz]
    p_i["_du_sum"] = p_i["_du_sum"] + p_j["m"] * dot


def _records(state: Mapping[str, np.ndarray]) -> list[dict]:
    n = len(state["x"])
    return [
        {k: (list(map(float, v[r])) if np.ndim(v) == 2 else float(v[r])) for k, v in state.items()}
        for r in range(n)
    ]


def reference_density(state: Mapping[str, np.ndarray], group: int = NEIGHBOURS) -> np.ndarray:
    """Density through the literal loop driver, one neighbour group at a time."""
    recs = _records({k: state[k] for k in ("x", "m", "h")})
    out = []
    for g in range(0, len(recs), group):
        block = recs[g : g + group]
        for p in block:
            p["rho"] = 0.0
        call_quadratic(density_pair, block, block)
        out.extend(p["rho"] for p in block)
    return np.array(out)


def reference_force(state: Mapping[str, np.ndarray], group: int = NEIGHBOURS) -> tuple[np.ndarray, np.ndarray]:
    recs = _records({k: state[k] for k in ("x", "v", "m", "h", "rho", "P")})
    acc, du = [], []
    for g in range(0, len(recs), group):
        block = recs[g : g + group]
        for p in block:
            p["a"] = [0.0, 0.0, 0.0]
            p["_du_sum"] = 0.0
        call_quadratic(force_pair, block, block)
        for p in block:
            acc.append(p["a"])
            du.append(p["P"] / (p["rho"] * p["rho"]) * p["_du_sum"])
    return np.array(acc), np.array(du)


# -- kernels over packed buffers ----------------------------------------------


def identity_access(schema: RecordSchema) -> KernelAccessSet:
    """The no-op kernel: reads every field, writes none."""
    return KernelAccessSet("identity", frozenset(schema.names), frozenset())


def _split(ngroups: int, threads: int) -> list[tuple[int, int]]:
    threads = max(1, min(threads, ngroups))
    bounds = np.linspace(0, ngroups, threads + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _store_for(view: PackedBuffer, name: str):
    spec = view.schema.field(name).spec
    return lambda arr: quantize_array(arr, spec)


def _quadratic(name, view_i, view_j, group_i, group_j, rows_i, rows_j, writeback, threads):
    fi = {k: read_field(view_i, k, rows_i) for k in _QUAD_READS_I[name]}
    fj = {k: read_field(view_j, k, rows_j) for k in _QUAD_READS_J[name]}
    fi = {k: np.ascontiguousarray(v) for k, v in fi.items()}
    fj = {k: np.ascontiguousarray(v) for k, v in fj.items()}
    ni, nj = len(fi["x"]), len(fj["x"])
    if group_i <= 0 or group_j <= 0 or ni % group_i or nj % group_j or ni // group_i != nj // group_j:
        raise ValueError(
            f"{name}: {ni} i-records in groups of {group_i} do not pair with "
            f"{nj} j-records in groups of {group_j}"
        )
    ngroups = ni // group_i
    per_access = writeback == "per-access"
    impl = _backend.purepy if per_access else _backend.impl

    if name == "density":
        store = {"store": _store_for(view_i, "rho")} if per_access else {}

        def run(a, b):
            si, sj = slice(a * group_i, b * group_i), slice(a * group_j, b * group_j)
            return impl.density(fi["x"][si], fi["h"][si], fj["x"][sj], fj["m"][sj], fj["h"][sj], group_i, group_j, **store)

    else:
        if np.any(fi["rho"] == 0.0) or np.any(fj["rho"] == 0.0):
            raise DegenerateStateError("force: rho = 0 for at least one particle")
        store = {"store_a": _store_for(view_i, "a"), "store_du": _store_for(view_i, "du")} if per_access else {}

        def run(a, b):
            si, sj = slice(a * group_i, b * group_i), slice(a * group_j, b * group_j)
            return impl.force(
                fi["x"][si], fi["v"][si], fi["h"][si], fi["rho"][si], fi["P"][si],
                fj["x"][sj], fj["v"][sj], fj["m"][sj], fj["h"][sj], fj["rho"][sj], fj["P"][sj],
                group_i, group_j, **store,
            )

    chunks = _split(ngroups, threads)
    if len(chunks) <= 1:
        parts = [run(0, ngroups)] if ngroups else []
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            parts = list(pool.map(lambda ab: run(*ab), chunks))

    if name == "density":
        rho = np.concatenate(parts) if parts else np.zeros(0)
        write_field(view_i, "rho", rho, rows_i)
    else:
        a = np.concatenate([p[0] for p in parts]) if parts else np.zeros((0, 3))
        du = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
        write_field(view_i, "a", a, rows_i)
        write_field(view_i, "du", du, rows_i)


_QUAD_READS_I = {"density": ("x", "h"), "force": ("x", "v", "h", "rho", "P")}
_QUAD_READS_J = {"density": ("x", "m", "h"), "force": ("x", "v", "m", "h", "rho", "P")}


def _linear(name, view, dt, rows):
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if name == "identity":
        return
    if name == "kick":
        p = kick({k: read_field(view, k, rows) for k in ("v", "a", "u", "du")}, dt)
        write_field(view, "v", p["v"], rows)
        write_field(view, "u", p["u"], rows)
    elif name == "drift":
        p = drift({k: read_field(view, k, rows) for k in ("x", "v")}, dt)
        write_field(view, "x", p["x"], rows)


def apply_kernel(
    name: str,
    view_i: PackedBuffer,
    view_j: PackedBuffer | None = None,
    *,
    dt: float = 0.0,
    group: int = NEIGHBOURS,
    group_i: int | None = None,
    rows_i=None,
    rows_j=None,
    writeback: str = "deferred",
    threads: int = 1,
) -> None:
    """Run kernel ``name`` in place on ``view_i`` (any layout/precision tags).

    Quadratic kernels pair neighbour group ``g`` of ``view_i`` with group
    ``g`` of ``view_j`` (default: ``view_i`` itself).  ``rows_i``/``rows_j``
    restrict the records taken from each view.
    """
    if writeback not in ("deferred", "per-access"):
        raise ValueError(f"unknown writeback mode {writeback!r}")
    if name in QUADRATIC:
        _quadratic(
            name,
            view_i,
            view_i if view_j is None else view_j,
            group if group_i is None else group_i,
            group,
            rows_i,
            rows_j,
            writeback,
            threads,
        )
    elif name in LINEAR:
        _linear(name, view_i, dt, rows_i)
    else:
        raise ValueError(f"unknown kernel {name!r}")
