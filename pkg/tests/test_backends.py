import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soaforge import _backend
from soaforge.particles import make_particles

native = pytest.mark.skipif(_backend.native is None, reason="compiled backend not built")


def columns(n, seed):
    s = make_particles(n, seed)
    return {k: np.ascontiguousarray(s[k], dtype=np.float64) for k in ("x", "v", "m", "h", "rho", "P")}


@native
@pytest.mark.parametrize("n, gi, gj", [(64, 64, 64), (256, 64, 64), (128, 1, 64), (64, 8, 8)])
def test_kernels_bit_identical(n, gi, gj):
    c = columns(n, n + gi)
    ni = n // gj * gi
    xi, hi = c["x"][:ni].copy(), c["h"][:ni].copy()
    a = _backend.native.density(xi, hi, c["x"], c["m"], c["h"], gi, gj)
    b = _backend.purepy.density(xi, hi, c["x"], c["m"], c["h"], gi, gj)
    assert np.array_equal(a, b)
    args = (xi, c["v"][:ni].copy(), hi, c["rho"][:ni].copy(), c["P"][:ni].copy(),
            c["x"], c["v"], c["m"], c["h"], c["rho"], c["P"], gi, gj)
    for p, q in zip(_backend.native.force(*args), _backend.purepy.force(*args)):
        assert np.array_equal(p, q)


@native
@given(width=st.integers(1, 64), seed=st.integers(0, 2**32 - 1))
def test_bit_kernels_identical(width, seed):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 256, 200, dtype=np.uint8)
    offs = np.sort(rng.choice(200 * 8 - 64, 20, replace=False)).astype(np.int64)
    assert np.array_equal(_backend.native.gather_bits(data, offs, width), _backend.purepy.gather_bits(data, offs, width))
    offs = np.arange(20, dtype=np.int64) * width + rng.integers(0, 8)
    vals = rng.integers(0, 2**64, 20, dtype=np.uint64, endpoint=False) & np.uint64((1 << width) - 1)
    d1, d2 = data.copy(), data.copy()
    _backend.native.scatter_bits(d1, offs, width, vals)
    _backend.purepy.scatter_bits(d2, offs, width, vals)
    assert np.array_equal(d1, d2)


@native
def test_native_rejects_per_access_store():
    c = columns(64, 0)
    with pytest.raises(NotImplementedError):
        _backend.native.density(c["x"], c["h"], c["x"], c["m"], c["h"], 64, 64, store=lambda a: a)


def test_group_pairing_checked():
    c = columns(64, 0)
    for impl in filter(None, (_backend.native, _backend.purepy)):
        with pytest.raises(ValueError):
            impl.density(c["x"], c["h"], c["x"], c["m"], c["h"], 64, 32)


def test_environment_selects_fallback():
    env = dict(os.environ, SOAFORGE_PURE="1")
    out = subprocess.run(
        [sys.executable, "-c", "import soaforge; print(soaforge.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
    assert _backend.NAME in ("cython", "numpy")
    assert _backend.impl is (_backend.native or _backend.purepy) or os.environ.get("SOAFORGE_PURE")
