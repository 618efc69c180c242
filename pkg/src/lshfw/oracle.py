"""Brute-force references used as ground truth.

Deliberately share no kernels with :mod:`lshfw.maxip` or :mod:`lshfw.fw`:
scores are computed on the original (untransformed) vectors, one row at a
time where practical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vecspace import Dataset


@dataclass(frozen=True)
class OracleReport:
    best_index: int
    best_value: float
    runner_up_value: float
    scanned: int


def _rows(Y) -> np.ndarray:
    return Y.points if isinstance(Y, Dataset) else np.atleast_2d(np.asarray(Y, dtype=np.float64))


def maxip_scan(Y, x) -> OracleReport:
    """Exact ``argmax_y <x, y>`` with ties going to the lowest index."""
    pts = _rows(Y)
    x = np.asarray(x, dtype=np.float64)
    if pts.shape[0] == 0:
        raise ValueError("empty dataset")
    if pts.shape[1] != x.shape[0]:
        raise ValueError(f"query dimension {x.shape[0]} does not match data dimension {pts.shape[1]}")
    vals = np.einsum("ij,j->i", pts, x)
    best = 0
    for i in range(1, vals.shape[0]):
        if vals[i] > vals[best]:
            best = i
    rest = np.delete(vals, best)
    runner = float(rest.max()) if rest.size else float("-inf")
    return OracleReport(best, float(vals[best]), runner, pts.shape[0])


def minip_direction(Y, w, grad) -> OracleReport:
    """Exact ``argmin_s <s - w, grad>``, reported as a max of the negated value."""
    pts = _rows(Y)
    diffs = pts - np.asarray(w, dtype=np.float64)[None, :]
    vals = -np.einsum("ij,j->i", diffs, np.asarray(grad, dtype=np.float64))
    best = 0
    for i in range(1, vals.shape[0]):
        if vals[i] > vals[best]:
            best = i
    rest = np.delete(vals, best)
    runner = float(rest.max()) if rest.size else float("-inf")
    return OracleReport(best, float(vals[best]), runner, pts.shape[0])


def fw_gap_exact(ds, w, grad) -> float:
    """Frank-Wolfe gap ``-min_s <s - w, grad>``; nonnegative for convex g and w in the hull."""
    return minip_direction(ds, w, grad).best_value


def hull_violation(ds, w, directions) -> float:
    """Largest ``q^T w - max_i q^T s_i`` over the rows of ``directions``.

    A point of the hull never exceeds zero here; positive values certify
    infeasibility.
    """
    pts = _rows(ds)
    q = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    support = (q @ pts.T).max(axis=1)
    return float((q @ np.asarray(w, dtype=np.float64) - support).max())


def quantizer_error_sweep(grid, queries, Y) -> float:
    """``max |<q, y> - <center(q), y>|`` over all query rows and data rows (raw centers)."""
    pts = _rows(Y)
    worst = 0.0
    for q in np.atleast_2d(queries):
        c = grid.center(q)
        worst = max(worst, float(np.abs(pts @ (q - c)).max()))
    return worst
