"""Matrix-free conjugate gradient for symmetric positive-definite operators."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

logger = logging.getLogger(__name__)

BREAKDOWN_TOL = 1e-12


class CGBreakdown(ArithmeticError):
    """Raised when the operator is numerically indefinite or values blow up."""


@dataclass
class CGConfig:
    """Stopping rule ``||r_k|| / ||r_0|| < tol``.

    ``max_iter`` and ``restart`` default to ``min(n, 1000)`` and ``n``.
    ``tol_schedule(k, rel_residual) -> tol``, when given, replaces ``tol``
    at iteration ``k``. ``reorthogonalize`` projects each new residual off
    the earlier ones (two Gram-Schmidt passes), which keeps finite-precision
    runs close to the exact-arithmetic n-step termination at O(k n) memory.
    """

    tol: float = 1e-6
    max_iter: int | None = None
    restart: int | None = None
    tol_schedule: object = None
    reorthogonalize: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart must be >= 1")


@dataclass
class CGReport:
    iterations: int
    residual_norms: list = field(default_factory=list)
    converged: bool = False
    relative_residual: float = 0.0

    def as_dict(self):
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "relative_residual": self.relative_residual,
        }


def as_operator(A):
    """Accept a LinearOperator, dense/sparse matrix, or ``(n, matvec)`` pair."""
    if isinstance(A, tuple):
        n, matvec = A
        return LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    return aslinearoperator(A)


def solve(A, b, config=None, callback=None):
    """Solve ``A x = b`` from ``x0 = 0``; return ``(x, CGReport)``.

    ``callback(k, x)`` runs after every iteration. Raises :class:`CGBreakdown`
    when ``p^T A p <= 1e-12 ||p||^2`` or a non-finite value appears.
    """
    config = config or CGConfig()
    A = as_operator(A)
    b = np.asarray(b, dtype=np.float64).ravel()
    n = b.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"operator shape {A.shape} does not match rhs length {n}")
    if not np.all(np.isfinite(b)):
        raise CGBreakdown("right-hand side has non-finite entries")
    max_iter = config.max_iter if config.max_iter is not None else min(n, 1000)
    restart = config.restart if config.restart is not None else n

    x = np.zeros(n)
    r = b.copy()
    rr = float(r @ r)
    r0 = np.sqrt(rr)
    history = [r0]
    if r0 == 0.0:
        return x, CGReport(0, history, True, 0.0)
    p = r.copy()
    basis = np.empty((min(max_iter, restart) + 1, n)) if config.reorthogonalize else None
    n_basis = 0
    if basis is not None:
        basis[0] = r / r0
        n_basis = 1
    tol = config.tol
    k = 0
    rel = 1.0
    converged = False
    while k < max_iter:
        Ap = A.matvec(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise CGBreakdown(f"non-finite curvature at iteration {k}")
        if pAp <= BREAKDOWN_TOL * float(p @ p):
            raise CGBreakdown(
                f"p^T A p = {pAp:.3e} at iteration {k}: operator is not positive definite; "
                "increase the damping"
            )
        step = rr / pAp
        x += step * p
        r -= step * Ap
        if basis is not None:
            Q = basis[:n_basis]
            for _ in range(2):
                r -= Q.T @ (Q @ r)
        rr_new = float(r @ r)
        k += 1
        rel = np.sqrt(rr_new) / r0
        history.append(float(np.sqrt(rr_new)))
        if not np.isfinite(rel):
            raise CGBreakdown(f"non-finite residual at iteration {k}")
        if callback is not None:
            callback(k, x)
        if config.tol_schedule is not None:
            tol = config.tol_schedule(k, rel)
        if rel < tol:
            converged = True
            break
        if k % restart == 0:
            p = r.copy()
            n_basis = 0
        else:
            p = r + (rr_new / rr) * p
        if basis is not None and n_basis < len(basis):
            basis[n_basis] = r / np.sqrt(rr_new)
            n_basis += 1
        rr = rr_new
    if not converged:
        logger.info("CG stopped at iteration cap %d with relative residual %.3e", k, rel)
    return x, CGReport(k, history, converged, float(rel))


def write_history_csv(report, path):
    r0 = report.residual_norms[0] if report.residual_norms else 0.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "residual_norm", "relative_residual"])
        for k, r in enumerate(report.residual_norms):
            writer.writerow([k, r, r / r0 if r0 else 0.0])
