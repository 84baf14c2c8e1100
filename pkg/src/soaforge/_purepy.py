"""NumPy implementations of the hot kernels.

Loaded when the compiled ``_native`` extension is unavailable (or when
``SOAFORGE_PURE=1``).  Pair terms are evaluated for whole
blocks of groups at once; the sums then run over ``j`` in ascending order, so
every ``i`` sees exactly the arithmetic of the compiled loops.
"""

from __future__ import annotations

import math

import numpy as np

NAME = "numpy"

SIGMA = 1.0 / math.pi

_U64 = np.uint64
_ALL_ONES = _U64(0xFFFFFFFFFFFFFFFF)


def _mask(width: int) -> np.uint64:
    return _ALL_ONES >> _U64(64 - width)


def _padded(data: np.ndarray) -> np.ndarray:
    out = np.zeros(data.size + 9, dtype=np.uint8)
    out[: data.size] = data
    return out


def gather_bits(data: np.ndarray, offsets: np.ndarray, width: int) -> np.ndarray:
    if offsets.size == 0:
        return np.zeros(0, dtype=np.uint64)
    pad = _padded(data)
    rows = np.lib.stride_tricks.as_strided(pad, shape=(data.size + 1, 9), strides=(1, 1))
    win = rows[offsets >> 3]
    lo = np.ascontiguousarray(win[:, :8]).view("<u8").ravel()
    hi = win[:, 8].astype(np.uint64)
    sh = (offsets & 7).astype(np.uint64)
    # two-step shift: hi << (64 - sh) without shifting by 64 when sh == 0
    v = (lo >> sh) | ((hi << (_U64(63) - sh)) << _U64(1))
    return v & _mask(width)


def scatter_bits(data: np.ndarray, offsets: np.ndarray, width: int, values: np.ndarray) -> None:
    if offsets.size == 0:
        return
    bits = np.unpackbits(data, bitorder="little")
    vals = values.astype("<u8").view(np.uint8).reshape(-1, 8)
    vbits = np.unpackbits(vals, axis=1, bitorder="little")[:, :width]
    bits[offsets[:, None].astype(np.int64) + np.arange(width)] = vbits
    data[:] = np.packbits(bits, bitorder="little")


def _groups(ni, nj, gi, gj):
    if gi <= 0 or gj <= 0 or ni % gi or nj % gj or ni // gi != nj // gj:
        raise ValueError(
            f"cannot pair {ni} i-records in groups of {gi} with "
            f"{nj} j-records in groups of {gj}"
        )
    return ni // gi


def _kernel_terms(dx, dy, dz, hi, hj):
    """Return (w, dw/dr / r) for separations (dx, dy, dz)."""
    r2 = dx * dx + dy * dy + dz * dz
    r = np.sqrt(r2)
    hij = 0.5 * (hi + hj)
    q = r / hij
    h3 = hij * hij * hij
    h4 = h3 * hij
    t = 2.0 - q
    inner = q < 1.0
    outer = ~inner & (q < 2.0)
    wq = np.where(inner, 1.0 - 1.5 * q * q + 0.75 * q * q * q, np.where(outer, 0.25 * t * t * t, 0.0))
    dq = np.where(inner, -3.0 * q + 2.25 * q * q, np.where(outer, -0.75 * t * t, 0.0))
    w = SIGMA / h3 * wq
    dwdr = SIGMA / h4 * dq
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(r > 0.0, dwdr / r, 0.0)
    return w, f


# pair temporaries per block stay around 2 MB each
_BLOCK_PAIRS = 1 << 18


def _blocks(ni, nj, gi, gj):
    ng = _groups(ni, nj, gi, gj)
    step = max(1, _BLOCK_PAIRS // (gi * gj))
    for g0 in range(0, ng, step):
        g1 = min(ng, g0 + step)
        yield slice(g0 * gi, g1 * gi), slice(g0 * gj, g1 * gj)


def density(xi, hi, xj, mj, hj, gi, gj, store=None):
    """rho_i = sum_j m_j W(|x_i - x_j|, (h_i + h_j) / 2) within each group.

    ``store`` (optional) is applied to the running sum after every
    contribution, modelling a quantising store on each access.
    """
    parts = [
        _density(xi[si], hi[si], xj[sj], mj[sj], hj[sj], gi, gj, store)
        for si, sj in _blocks(len(xi), len(xj), gi, gj)
    ]
    return np.concatenate(parts)


def force(xi, vi, hi, rhoi, Pi, xj, vj, mj, hj, rhoj, Pj, gi, gj, store_a=None, store_du=None):
    """Pressure acceleration and compressive heating rate for each i.

    a_i = -sum_j m_j (P_i/rho_i^2 + P_j/rho_j^2) grad W_ij
    du_i = P_i/rho_i^2 * sum_j m_j (v_i - v_j) . grad W_ij
    """
    parts = [
        _force(xi[si], vi[si], hi[si], rhoi[si], Pi[si], xj[sj], vj[sj], mj[sj], hj[sj], rhoj[sj], Pj[sj],
               gi, gj, store_a, store_du)
        for si, sj in _blocks(len(xi), len(xj), gi, gj)
    ]
    return np.concatenate([a for a, _ in parts]), np.concatenate([d for _, d in parts])


def _pair_geometry(Xi, Xj, Hi, Hj):
    """Separations and kernel terms for every (group, i, j), shape (ng, gi, gj)."""
    dx = Xi[:, :, None, 0] - Xj[:, None, :, 0]
    dy = Xi[:, :, None, 1] - Xj[:, None, :, 1]
    dz = Xi[:, :, None, 2] - Xj[:, None, :, 2]
    w, f = _kernel_terms(dx, dy, dz, Hi[:, :, None], Hj[:, None, :])
    return dx, dy, dz, w, f


def _density(xi, hi, xj, mj, hj, gi, gj, store):
    ng = _groups(len(xi), len(xj), gi, gj)
    Xi = xi.reshape(ng, gi, 3)
    Xj = xj.reshape(ng, gj, 3)
    Hi = hi.reshape(ng, gi)
    Hj = hj.reshape(ng, gj)
    Mj = mj.reshape(ng, gj)
    _, _, _, w, _ = _pair_geometry(Xi, Xj, Hi, Hj)
    mw = Mj[:, None, :] * w
    rho = np.zeros((ng, gi))
    if store is not None:
        rho = store(rho)
    for j in range(gj):
        rho = rho + mw[:, :, j]
        if store is not None:
            rho = store(rho)
    return rho.reshape(-1)


def _force(xi, vi, hi, rhoi, Pi, xj, vj, mj, hj, rhoj, Pj, gi, gj, store_a, store_du):
    ng = _groups(len(xi), len(xj), gi, gj)
    Xi = xi.reshape(ng, gi, 3)
    Vi = vi.reshape(ng, gi, 3)
    Xj = xj.reshape(ng, gj, 3)
    Vj = vj.reshape(ng, gj, 3)
    Hi = hi.reshape(ng, gi)
    faci = (Pi / (rhoi * rhoi)).reshape(ng, gi)
    Hj = hj.reshape(ng, gj)
    Mj = mj.reshape(ng, gj)
    facj = (Pj / (rhoj * rhoj)).reshape(ng, gj)
    dx, dy, dz, _, f = _pair_geometry(Xi, Xj, Hi, Hj)
    gx = f * dx
    gy = f * dy
    gz = f * dz
    m = Mj[:, None, :]
    fac = m * (faci[:, :, None] + facj[:, None, :])
    dot = (
        (Vi[:, :, None, 0] - Vj[:, None, :, 0]) * gx
        + (Vi[:, :, None, 1] - Vj[:, None, :, 1]) * gy
        + (Vi[:, :, None, 2] - Vj[:, None, :, 2]) * gz
    )
    tx, ty, tz = fac * gx, fac * gy, fac * gz
    mdot = m * dot
    ax = np.zeros((ng, gi))
    ay = np.zeros((ng, gi))
    az = np.zeros((ng, gi))
    acc = np.zeros((ng, gi))
    for j in range(gj):
        ax = ax - tx[:, :, j]
        ay = ay - ty[:, :, j]
        az = az - tz[:, :, j]
        if store_a is not None:
            ax, ay, az = store_a(ax), store_a(ay), store_a(az)
        if store_du is not None:
            acc = store_du(acc + faci * mdot[:, :, j])
        else:
            acc = acc + mdot[:, :, j]
    a = np.stack([ax.reshape(-1), ay.reshape(-1), az.reshape(-1)], axis=1)
    du = acc if store_du is not None else faci * acc
    return a, du.reshape(-1)
