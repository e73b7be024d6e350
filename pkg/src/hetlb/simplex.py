"""Dense two-phase primal simplex with Bland's anti-cycling rule.

Solves ``min c.x  s.t.  A x = b, x >= 0``. Problem sizes here are a few
hundred columns at most, so a full tableau is the simplest correct choice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL = 1e-9


class LPInfeasible(Exception):
    pass


class LPUnbounded(Exception):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    objective: float
    pivots: int


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    col_vals = T[:, col].copy()
    col_vals[row] = 0.0
    T -= np.outer(col_vals, T[row])


def _run(T: np.ndarray, basis: list[int], n_cols: int, tol: float, max_pivots: int) -> int:
    """Iterate on tableau T (last row = reduced costs, last column = rhs)."""
    pivots = 0
    m = len(basis)
    while True:
        reduced = T[-1, :n_cols]
        entering = np.flatnonzero(reduced < -tol)
        if entering.size == 0:
            return pivots
        col = int(entering[0])
        column = T[:m, col]
        candidates = np.flatnonzero(column > tol)
        if candidates.size == 0:
            raise LPUnbounded("objective unbounded below")
        ratios = T[candidates, -1] / column[candidates]
        best = ratios.min()
        ties = candidates[ratios <= best + tol * max(1.0, abs(best))]
        row = int(min(ties, key=lambda r: basis[r]))
        _pivot(T, row, col)
        basis[row] = col
        pivots += 1
        if pivots > max_pivots:
            raise RuntimeError("simplex exceeded its pivot budget")


def solve_lp(c, A_eq, b_eq, tol: float = TOL, max_pivots: int = 200_000) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.array(A_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    m, n = A.shape
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificials n..n+m-1
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    pivots = _run(T, basis, n + m, tol, max_pivots)
    if -T[-1, -1] > tol * max(1.0, np.abs(b).max(initial=0.0)):
        raise LPInfeasible("no feasible point")

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = []
    for r in range(m):
        if basis[r] < n:
            keep.append(r)
            continue
        nz = np.flatnonzero(np.abs(T[r, :n]) > tol)
        if nz.size:
            _pivot(T, r, int(nz[0]))
            basis[r] = int(nz[0])
            keep.append(r)
    rows = keep
    T2 = np.zeros((len(rows) + 1, n + 1))
    T2[:-1, :n] = T[rows, :n]
    T2[:-1, -1] = T[rows, -1]
    basis = [basis[r] for r in rows]

    # phase 2
    T2[-1, :n] = c
    for r, j in enumerate(basis):
        T2[-1] -= c[j] * T2[r]
    pivots += _run(T2, basis, n, tol, max_pivots)

    x = np.zeros(n)
    for r, j in enumerate(basis):
        x[j] = T2[r, -1]
    x[np.abs(x) < tol] = 0.0
    return LPResult(x=x, objective=float(c @ x), pivots=pivots)
