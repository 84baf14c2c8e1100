"""Initial particle states: seeded random boxes and a CSV loader."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from soaforge import _backend
from soaforge.sph import NEIGHBOURS, eos

__all__ = ["make_particles", "load_particles_csv", "finish_state", "CSV_COLUMNS"]

CSV_COLUMNS = ("id", "x0", "x1", "x2", "v0", "v1", "v2", "u", "m", "h")


def finish_state(state: dict, dt: float = 1e-3, group: int = NEIGHBOURS) -> dict:
    """Fill rho (binary64 density pass), P, cs, a, du and dt in place."""
    n = len(state["x"])
    state["rho"] = _density(state, group)
    state["P"], state["cs"] = eos(state["rho"], state["u"])
    state["a"] = np.zeros((n, 3))
    state["du"] = np.zeros(n)
    state["dt"] = np.full(n, float(dt))
    return state


def _density(state, group):
    x, h, m = (np.ascontiguousarray(state[k], dtype=np.float64) for k in ("x", "h", "m"))
    return _backend.impl.density(x, h, x, m, h, group, group)


def make_particles(count: int, seed: int = 0, dt: float = 1e-3, group: int = NEIGHBOURS) -> dict:
    """``count`` particles in the unit box, drawn from ``numpy.random.default_rng(seed)``."""
    if count <= 0:
        raise ValueError("count must be positive")
    if count % group:
        raise ValueError(f"count {count} is not a multiple of the group size {group}")
    rng = np.random.default_rng(seed)
    state = {
        "x": rng.random((count, 3)),
        "id": np.arange(count, dtype=np.int64),
        "v": rng.uniform(-1.0, 1.0, (count, 3)),
        "u": rng.uniform(0.5, 1.5, count),
        "m": rng.uniform(0.8, 1.2, count) / group,
        "h": rng.uniform(0.2, 0.3, count),
    }
    return finish_state(state, dt, group)


def load_particles_csv(path: str | Path, dt: float = 1e-3, group: int = NEIGHBOURS) -> dict:
    """Read ``id,x0,x1,x2,v0,v1,v2,u,m,h`` rows (header line required)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no particles")
    missing = set(CSV_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    try:
        col = {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from None
    if len(rows) % group:
        raise ValueError(f"{path}: {len(rows)} particles is not a multiple of the group size {group}")
    state = {
        "x": np.stack([col["x0"], col["x1"], col["x2"]], axis=1),
        "id": col["id"].astype(np.int64),
        "v": np.stack([col["v0"], col["v1"], col["v2"]], axis=1),
        "u": col["u"],
        "m": col["m"],
        "h": col["h"],
    }
    if np.any(state["h"] <= 0) or np.any(state["m"] <= 0):
        raise ValueError(f"{path}: m and h must be positive")
    return finish_state(state, dt, group)
