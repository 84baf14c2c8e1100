"""Acceleration error of truncated storage against a binary64 run."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from soaforge import layout_ops as ops
from soaforge.fpcodec import MAX_TOTAL_BITS, MIN_TOTAL_BITS
from soaforge.schema import RecordSchema
from soaforge.sph import NEIGHBOURS, apply_kernel

__all__ = ["DEFAULT_SWEEP", "TruncationRow", "accelerations", "truncation_study"]

DEFAULT_SWEEP = (64, 56, 48, 40, 34, 33, 32, 24, 17, 16, 12)


@dataclass(frozen=True)
class TruncationRow:
    total_bits: int
    rmse_rel: float
    max_rel: float


def accelerations(schema: RecordSchema, state: Mapping[str, np.ndarray], group=NEIGHBOURS, threads=1):
    """Store ``state`` under ``schema``, run density then force, return decoded a."""
    buf = ops.pack_records(schema, state)
    apply_kernel("density", buf, group=group, threads=threads)
    apply_kernel("force", buf, group=group, threads=threads)
    return ops.read_field(buf, "a")


def truncation_study(
    schema: RecordSchema,
    state: Mapping[str, np.ndarray],
    sweep: Iterable[int] = DEFAULT_SWEEP,
    *,
    exclude=("x",),
    group: int = NEIGHBOURS,
    threads: int = 1,
) -> list[TruncationRow]:
    """One row per T: every float field outside ``exclude`` stored in T bits.

    ``rmse_rel = sqrt(mean |da|^2) / mean |a_ref|`` and
    ``max_rel = max |da| / mean |a_ref|``, with ``a_ref`` from an all-binary64 run.
    """
    sweep = [int(t) for t in sweep]
    bad = [t for t in sweep if not MIN_TOTAL_BITS <= t <= MAX_TOTAL_BITS]
    if bad:
        raise ValueError(f"sweep values must lie in [{MIN_TOTAL_BITS}, {MAX_TOTAL_BITS}], got {bad}")
    ref = accelerations(schema.widened(exclude), state, group, threads)
    scale = np.mean(np.linalg.norm(ref, axis=1))
    rows = []
    for t in sweep:
        a = accelerations(schema.with_truncation(t, exclude), state, group, threads)
        err = np.linalg.norm(a - ref, axis=1)
        rows.append(TruncationRow(t, float(np.sqrt(np.mean(err**2)) / scale), float(err.max() / scale)))
    return rows
