"""Dense two-phase simplex for standard-form LPs: min c'x s.t. Ax = b, x >= 0.

Problem sizes here are tens to a few hundred variables, so a dense tableau
with Bland's rule (anti-cycling, deterministic) is exact enough and keeps the
package free of external solver dependencies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

PIVOT_TOL = 1e-9


@dataclass
class SimplexResult:
    status: str        # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float | None


def _pivot(T, basis, row, col):
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]
    basis[row] = col


def _iterate(T, basis, allowed):
    """Run Bland-rule pivots until optimal; returns False on unboundedness."""
    while True:
        cost = T[-1, :-1]
        entering = -1
        for j in allowed:
            if cost[j] < -PIVOT_TOL:
                entering = j
                break
        if entering < 0:
            return True
        ratios = []
        for r in range(T.shape[0] - 1):
            if T[r, entering] > PIVOT_TOL:
                ratios.append((T[r, -1] / T[r, entering], basis[r], r))
        if not ratios:
            return False
        _, _, row = min(ratios)
        _pivot(T, basis, row, entering)


def simplex_solve(c, A, b, max_pivots=None):
    """Two-phase dense simplex on min c'x, Ax = b, x >= 0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).copy()
    c = np.asarray(c, dtype=float)
    if A.ndim != 2 or A.shape != (b.size, c.size):
        raise NumericalError(f"inconsistent LP dimensions A{A.shape}, b{b.shape}, c{c.shape}")
    k, nv = A.shape

    A = A.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # Phase 1: artificial basis, minimize total artificial mass.
    T = np.zeros((k + 1, nv + k + 1))
    T[:k, :nv] = A
    T[:k, nv : nv + k] = np.eye(k)
    T[:k, -1] = b
    basis = list(range(nv, nv + k))
    T[-1, :] = -T[:k, :].sum(axis=0)
    T[-1, nv : nv + k] = 0.0

    if not _iterate(T, basis, range(nv + k)):
        raise NumericalError("phase-1 LP unbounded; constraint assembly is broken")
    if T[-1, -1] < -1e-7:
        return SimplexResult(status="infeasible", x=None, objective=None)

    # Drive leftover artificials out of the basis; drop rows that cannot pivot.
    keep = []
    for r in range(k):
        if basis[r] >= nv:
            col = next((j for j in range(nv) if abs(T[r, j]) > PIVOT_TOL), None)
            if col is None:
                continue  # redundant constraint
            _pivot(T, basis, r, col)
        keep.append(r)
    if len(keep) < k:
        rows = keep + [k]
        T = T[rows]
        basis = [basis[r] for r in keep]
        k = len(keep)

    # Phase 2 on the original objective, artificial columns excluded.
    T = np.hstack([T[:, :nv], T[:, -1:]])
    T[-1, :] = 0.0
    T[-1, :nv] = c
    for r, bcol in enumerate(basis):
        if abs(T[-1, bcol]) > 0.0:
            T[-1] -= T[-1, bcol] * T[r]

    if not _iterate(T, basis, range(nv)):
        return SimplexResult(status="unbounded", x=None, objective=None)

    x = np.zeros(nv)
    for r, bcol in enumerate(basis):
        x[bcol] = T[r, -1]
    return SimplexResult(status="optimal", x=x, objective=float(c @ x))
