# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled bit-field and SPH pair kernels.

Mirrors ``soaforge._purepy`` operation for operation; both must stay
bit-identical.  Built with -ffp-contract=off so no FMA is fused in.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdint cimport uint8_t, uint64_t, int64_t

cnp.import_array()

NAME = "cython"

cdef double SIGMA = 1.0 / 3.141592653589793


cdef inline uint64_t _mask(int width) noexcept nogil:
    return (<uint64_t>0xFFFFFFFFFFFFFFFF) >> (64 - width)


def gather_bits(uint8_t[::1] data, const int64_t[::1] offsets, int width):
    cdef Py_ssize_t n = offsets.shape[0], nbytes = data.shape[0]
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] res = out
    cdef Py_ssize_t i, k, first, span
    cdef int sh
    cdef uint64_t lo, m = _mask(width)
    with nogil:
        for i in range(n):
            first = offsets[i] >> 3
            sh = offsets[i] & 7
            span = (sh + width + 7) >> 3
            lo = 0
            for k in range(span if span < 8 else 8):
                lo |= (<uint64_t>data[first + k]) << (8 * k)
            lo >>= sh
            if span == 9:
                lo |= (<uint64_t>data[first + 8]) << (64 - sh)
            res[i] = lo & m
    return out


def scatter_bits(uint8_t[::1] data, const int64_t[::1] offsets, int width,
                 const uint64_t[::1] values):
    cdef Py_ssize_t n = offsets.shape[0]
    cdef Py_ssize_t i, k, first, span
    cdef int sh
    cdef uint64_t m = _mask(width), v, lo_v, lo_m
    with nogil:
        for i in range(n):
            first = offsets[i] >> 3
            sh = offsets[i] & 7
            span = (sh + width + 7) >> 3
            v = values[i] & m
            lo_v = v << sh
            lo_m = m << sh
            for k in range(span if span < 8 else 8):
                data[first + k] = <uint8_t>(
                    (data[first + k] & ~(lo_m >> (8 * k))) | ((lo_v >> (8 * k)) & 0xFF))
            if span == 9:
                data[first + 8] = <uint8_t>(
                    (data[first + 8] & ~(m >> (64 - sh))) | (v >> (64 - sh)))


cdef int _groups(Py_ssize_t ni, Py_ssize_t nj, Py_ssize_t gi, Py_ssize_t gj) except -1:
    if gi <= 0 or gj <= 0 or ni % gi or nj % gj or ni // gi != nj // gj:
        raise ValueError(
            f"cannot pair {ni} i-records in groups of {gi} with "
            f"{nj} j-records in groups of {gj}")
    return ni // gi


cdef inline void _terms(double dx, double dy, double dz, double hi, double hj,
                        double* w, double* f) noexcept nogil:
    cdef double r2 = dx * dx + dy * dy + dz * dz
    cdef double r = sqrt(r2)
    cdef double hij = 0.5 * (hi + hj)
    cdef double q = r / hij
    cdef double h3 = hij * hij * hij
    cdef double h4 = h3 * hij
    cdef double t = 2.0 - q
    cdef double wq, dq
    if q < 1.0:
        wq = 1.0 - 1.5 * q * q + 0.75 * q * q * q
        dq = -3.0 * q + 2.25 * q * q
    elif q < 2.0:
        wq = 0.25 * t * t * t
        dq = -0.75 * t * t
    else:
        wq = 0.0
        dq = 0.0
    w[0] = SIGMA / h3 * wq
    if r > 0.0:
        f[0] = (SIGMA / h4 * dq) / r
    else:
        f[0] = 0.0


def density(const double[:, ::1] xi, const double[::1] hi,
            const double[:, ::1] xj, const double[::1] mj, const double[::1] hj,
            Py_ssize_t gi, Py_ssize_t gj, store=None):
    if store is not None:
        raise NotImplementedError("per-access stores run on the numpy backend")
    cdef Py_ssize_t ng = _groups(xi.shape[0], xj.shape[0], gi, gj)
    out = np.empty(xi.shape[0], dtype=np.float64)
    cdef double[::1] rho = out
    cdef Py_ssize_t g, i, j, ii, jj
    cdef double acc, w, f
    with nogil:
        for g in range(ng):
            for i in range(gi):
                ii = g * gi + i
                acc = 0.0
                for j in range(gj):
                    jj = g * gj + j
                    _terms(xi[ii, 0] - xj[jj, 0], xi[ii, 1] - xj[jj, 1],
                           xi[ii, 2] - xj[jj, 2], hi[ii], hj[jj], &w, &f)
                    acc = acc + mj[jj] * w
                rho[ii] = acc
    return out


def force(const double[:, ::1] xi, const double[:, ::1] vi, const double[::1] hi,
          const double[::1] rhoi, const double[::1] Pi,
          const double[:, ::1] xj, const double[:, ::1] vj, const double[::1] mj,
          const double[::1] hj, const double[::1] rhoj, const double[::1] Pj,
          Py_ssize_t gi, Py_ssize_t gj, store_a=None, store_du=None):
    if store_a is not None or store_du is not None:
        raise NotImplementedError("per-access stores run on the numpy backend")
    cdef Py_ssize_t ng = _groups(xi.shape[0], xj.shape[0], gi, gj)
    a_out = np.empty((xi.shape[0], 3), dtype=np.float64)
    du_out = np.empty(xi.shape[0], dtype=np.float64)
    cdef double[:, ::1] a = a_out
    cdef double[::1] du = du_out
    cdef Py_ssize_t g, i, j, ii, jj
    cdef double dx, dy, dz, w, f, gx, gy, gz, fac, faci, dot
    cdef double ax, ay, az, acc
    with nogil:
        for g in range(ng):
            for i in range(gi):
                ii = g * gi + i
                faci = Pi[ii] / (rhoi[ii] * rhoi[ii])
                ax = 0.0
                ay = 0.0
                az = 0.0
                acc = 0.0
                for j in range(gj):
                    jj = g * gj + j
                    dx = xi[ii, 0] - xj[jj, 0]
                    dy = xi[ii, 1] - xj[jj, 1]
                    dz = xi[ii, 2] - xj[jj, 2]
                    _terms(dx, dy, dz, hi[ii], hj[jj], &w, &f)
                    gx = f * dx
                    gy = f * dy
                    gz = f * dz
                    fac = mj[jj] * (faci + Pj[jj] / (rhoj[jj] * rhoj[jj]))
                    dot = ((vi[ii, 0] - vj[jj, 0]) * gx + (vi[ii, 1] - vj[jj, 1]) * gy
                           + (vi[ii, 2] - vj[jj, 2]) * gz)
                    ax = ax - fac * gx
                    ay = ay - fac * gy
                    az = az - fac * gz
                    acc = acc + mj[jj] * dot
                a[ii, 0] = ax
                a[ii, 1] = ay
                a[ii, 2] = az
                du[ii] = faci * acc
    return a_out, du_out
