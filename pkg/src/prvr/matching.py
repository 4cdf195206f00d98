"""Maximum-profit bipartite assignment of text queries to clips.

The solver pads the rectangular profit matrix to a square one with dummy
rows and runs a shortest-augmenting-path Hungarian algorithm. The compiled
kernel from ``prvr._assign_ext`` is used when it was built; otherwise the
pure-Python twin in ``prvr._assign_py`` is selected at import time. Set
``PRVR_PURE_PYTHON=1`` to force the fallback.
"""
import itertools
import os
from dataclasses import dataclass

import numpy as np

from . import _assign_py

if os.environ.get("PRVR_PURE_PYTHON") == "1":
    _ext = None
else:
    try:
        from . import _assign_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "compiled" if _ext is not None else "python"

# factorial guard for the exhaustive oracle
BRUTE_MAX_ROWS = 6
BRUTE_MAX_COLS = 8


class InfeasibleAssignmentError(ValueError):
    """More queries than clips: no injective assignment exists."""


@dataclass(frozen=True)
class AssignmentPlan:
    columns: tuple[int, ...]
    """Chosen clip index for each query row."""
    n_cols: int
    total_profit: float

    @property
    def matrix(self) -> np.ndarray:
        """Binary ``M_q x M_c`` assignment matrix."""
        a = np.zeros((len(self.columns), self.n_cols), dtype=np.int8)
        a[np.arange(len(self.columns)), list(self.columns)] = 1
        return a


def _check_profits(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2 or pi.shape[0] < 1 or pi.shape[1] < 1:
        raise ValueError(f"profit matrix must be a non-empty 2-D array, got shape {pi.shape}")
    if pi.shape[0] > pi.shape[1]:
        raise InfeasibleAssignmentError(
            f"{pi.shape[0]} queries cannot be assigned injectively to {pi.shape[1]} clips"
        )
    if not np.all(np.isfinite(pi)):
        raise ValueError("profit matrix contains non-finite entries")
    return pi


def _row_profit(pi: np.ndarray, columns) -> float:
    # fixed summation order so solver and oracle profits compare exactly
    total = 0.0
    for i, j in enumerate(columns):
        total += float(pi[i, j])
    return total


def min_cost_square(cost: np.ndarray, backend: str | None = None) -> list[int]:
    """Row-to-column map of a minimum-cost perfect matching."""
    backend = backend or BACKEND
    if backend == "compiled":
        if _ext is None:
            raise RuntimeError("compiled assignment kernel is not available")
        return _ext.min_cost_square(np.ascontiguousarray(cost, dtype=np.float64))
    return _assign_py.min_cost_square(np.asarray(cost, dtype=np.float64).tolist())


def solve_max_assignment(pi, backend: str | None = None) -> AssignmentPlan:
    """Assign every row to a distinct column maximizing the summed profit."""
    pi = _check_profits(pi)
    n_rows, n_cols = pi.shape
    if n_rows < n_cols:
        dummy = pi.min() - 2.0
        padded = np.vstack([pi, np.full((n_cols - n_rows, n_cols), dummy)])
    else:
        padded = pi
    cols = min_cost_square(-padded, backend=backend)[:n_rows]
    return AssignmentPlan(tuple(cols), n_cols, _row_profit(pi, cols))


def brute_force_assignment(pi) -> AssignmentPlan:
    """Exhaustive maximum over all injective row-to-column maps."""
    pi = _check_profits(pi)
    n_rows, n_cols = pi.shape
    if n_rows > BRUTE_MAX_ROWS or n_cols > BRUTE_MAX_COLS:
        raise ValueError(
            f"brute force limited to {BRUTE_MAX_ROWS}x{BRUTE_MAX_COLS}, got {n_rows}x{n_cols}"
        )
    best_cols, best = None, -np.inf
    for cols in itertools.permutations(range(n_cols), n_rows):
        profit = _row_profit(pi, cols)
        if profit > best:
            best, best_cols = profit, cols
    return AssignmentPlan(tuple(best_cols), n_cols, best)
