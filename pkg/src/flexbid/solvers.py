"""Pluggable LP backends.

A backend consumes the canonical sparse form

    minimize    c @ x
    subject to  A[i] @ x <= rhs[i]   (sense 'L')
                A[i] @ x >= rhs[i]   (sense 'G')
                A[i] @ x == rhs[i]   (sense 'E')
                lo <= x <= hi

and returns a :class:`BackendResult`.  The shipped adapters wrap
``scipy.optimize.linprog`` (HiGHS family); additional backends can be
registered under a new name in :data:`BACKENDS`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

#: normalized solver statuses
OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
FAILED = "backend_failure"


@dataclass
class LpData:
    """Canonical sparse LP payload handed to a backend."""

    c: np.ndarray
    A: sp.csr_matrix
    sense: np.ndarray  # '<U1' array of 'L'/'G'/'E'
    rhs: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def split_rows(self) -> tuple[sp.csr_matrix, np.ndarray, sp.csr_matrix, np.ndarray]:
        """Normalized (A_ub, b_ub, A_eq, b_eq) with 'G' rows negated."""
        is_l = self.sense == "L"
        is_g = self.sense == "G"
        is_e = self.sense == "E"
        A_ub = sp.vstack(
            [self.A[is_l], -self.A[is_g]], format="csr"
        ) if (is_l.any() or is_g.any()) else sp.csr_matrix((0, self.A.shape[1]))
        b_ub = np.concatenate([self.rhs[is_l], -self.rhs[is_g]])
        A_eq = self.A[is_e] if is_e.any() else None
        b_eq = self.rhs[is_e] if is_e.any() else None
        return A_ub, b_ub, A_eq, b_eq


@dataclass
class BackendResult:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    message: str = ""
    iterations: int = 0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


_SCIPY_STATUS = {0: OPTIMAL, 2: INFEASIBLE, 3: UNBOUNDED}


def _solve_scipy(data: LpData, method: str) -> BackendResult:
    started = time.perf_counter()
    A_ub, b_ub, A_eq, b_eq = data.split_rows()
    bounds = np.column_stack([data.lo, data.hi])
    try:
        res = linprog(
            data.c,
            A_ub=A_ub if A_ub.shape[0] else None,
            b_ub=b_ub if b_ub.size else None,
            A_eq=A_eq,
            b_eq=b_eq,
            bounds=bounds,
            method=method,
        )
    except Exception as exc:  # malformed input, solver crash
        return BackendResult(status=FAILED, message=str(exc))
    elapsed = time.perf_counter() - started
    status = _SCIPY_STATUS.get(res.status, FAILED)
    nit = int(np.sum(res.nit)) if res.nit is not None else 0
    if status == OPTIMAL and res.x is None:
        status = FAILED
    return BackendResult(
        status=status,
        x=np.asarray(res.x) if res.x is not None else None,
        objective=float(res.fun) if res.fun is not None else None,
        message=str(res.message),
        iterations=nit,
        wall_time=elapsed,
    )


def _scipy_backend(method: str):
    return lambda data: _solve_scipy(data, method)


BACKENDS = {
    "highs": _scipy_backend("highs"),
    "highs-ds": _scipy_backend("highs-ds"),
    "highs-ipm": _scipy_backend("highs-ipm"),
}


def solve_lp(data: LpData, backend: str = "highs") -> BackendResult:
    try:
        run = BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown backend {backend!r}, available: {sorted(BACKENDS)}")
    return run(data)
