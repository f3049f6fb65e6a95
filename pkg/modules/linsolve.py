"""
Linear Solvers Module - Krylov solvers for the theta-scheme systems
===================================================================
Unpreconditioned (optionally Jacobi-preconditioned) conjugate gradients for
symmetric positive definite systems, BiCGStab for nonsymmetric ones, and a
dense LU solve used as a test oracle.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import aslinearoperator

from .errors import SolverError

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-8


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: Optional[int] = None
    jacobi: bool = False


def _preconditioner(A, jacobi: bool):
    if not jacobi:
        return lambda v: v
    diag = np.asarray(A.diagonal(), dtype=float)
    if np.any(diag == 0):
        raise SolverError("Jacobi preconditioner needs a nonzero diagonal")
    inv = 1.0 / diag
    return lambda v: inv * v


def _max_iterations(n: int, max_iter: Optional[int]) -> int:
    return max(10 * n, 100) if max_iter is None else int(max_iter)


def cg_solve(A, b: np.ndarray, tol: float = DEFAULT_TOLERANCE, max_iter: Optional[int] = None,
             x0: Optional[np.ndarray] = None, jacobi: bool = False,
             info: Optional[Dict[str, Any]] = None) -> np.ndarray:
    """Conjugate gradients for symmetric positive definite A.

    Args:
        A: sparse matrix or anything aslinearoperator accepts
        b: right-hand side
        tol: stop when ||Ax - b|| <= tol ||b||
        max_iter: iteration cap (default 10 n)
        x0: initial guess
        jacobi: apply diagonal preconditioning
        info: optional dict filled with iterations and relative residual

    Raises:
        SolverError: no convergence within max_iter
    """
    op = aslinearoperator(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        _report(info, 0, 0.0)
        return np.zeros(n)
    apply_m = _preconditioner(A, jacobi)
    target = tol * b_norm

    r = b - op.matvec(x)
    r_norm = np.linalg.norm(r)
    z = apply_m(r)
    p = z.copy()
    rz = np.dot(r, z)
    limit = _max_iterations(n, max_iter)
    iterations = 0
    while r_norm > target:
        if iterations >= limit:
            raise SolverError("CG did not converge", r_norm / b_norm, iterations)
        q = op.matvec(p)
        pq = np.dot(p, q)
        if pq <= 0 or not np.isfinite(pq):
            raise SolverError("CG breakdown: matrix is not positive definite", r_norm / b_norm,
                              iterations, breakdown=True)
        step = rz / pq
        x += step * p
        r -= step * q
        r_norm = np.linalg.norm(r)
        z = apply_m(r)
        rz_new = np.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        iterations += 1
    _report(info, iterations, r_norm / b_norm)
    logger.debug("CG converged in %d iterations (residual %.2e)", iterations, r_norm / b_norm)
    return x


def bicgstab_solve(A, b: np.ndarray, tol: float = DEFAULT_TOLERANCE, max_iter: Optional[int] = None,
                   x0: Optional[np.ndarray] = None, jacobi: bool = False,
                   info: Optional[Dict[str, Any]] = None) -> np.ndarray:
    """BiCGStab (van der Vorst) for nonsymmetric A.

    Raises:
        SolverError: breakdown (rho or omega vanishing) or no convergence within max_iter
    """
    op = aslinearoperator(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        _report(info, 0, 0.0)
        return np.zeros(n)
    apply_m = _preconditioner(A, jacobi)
    target = tol * b_norm
    eps = np.finfo(float).eps

    r = b - op.matvec(x)
    r_norm = np.linalg.norm(r)
    r_hat = r.copy()
    rho_old = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    limit = _max_iterations(n, max_iter)
    iterations = 0
    while r_norm > target:
        if iterations >= limit:
            raise SolverError("BiCGStab did not converge", r_norm / b_norm, iterations)
        rho = np.dot(r_hat, r)
        if abs(rho) <= eps * np.linalg.norm(r_hat) * r_norm:
            raise SolverError("BiCGStab breakdown (rho ~ 0)", r_norm / b_norm, iterations, breakdown=True)
        if iterations == 0:
            p = r.copy()
        else:
            p = r + (rho / rho_old) * (alpha / omega) * (p - omega * v)
        z = apply_m(p)
        v = op.matvec(z)
        r_hat_v = np.dot(r_hat, v)
        if abs(r_hat_v) <= eps * np.linalg.norm(r_hat) * np.linalg.norm(v) or not np.isfinite(r_hat_v):
            raise SolverError("BiCGStab breakdown (alpha)", r_norm / b_norm, iterations, breakdown=True)
        alpha = rho / r_hat_v
        s = r - alpha * v
        iterations += 1
        s_norm = np.linalg.norm(s)
        if s_norm <= target:
            x += alpha * z
            r_norm = s_norm
            break
        y = apply_m(s)
        t = op.matvec(y)
        tt = np.dot(t, t)
        if tt == 0:
            raise SolverError("BiCGStab breakdown (t = 0)", s_norm / b_norm, iterations, breakdown=True)
        omega = np.dot(t, s) / tt
        if abs(omega) <= eps:
            raise SolverError("BiCGStab breakdown (omega ~ 0)", s_norm / b_norm, iterations, breakdown=True)
        x += alpha * z + omega * y
        r = s - omega * t
        r_norm = np.linalg.norm(r)
        if not np.isfinite(r_norm):
            raise SolverError("BiCGStab produced a non-finite residual", r_norm, iterations, breakdown=True)
        rho_old = rho
    true_residual = np.linalg.norm(b - op.matvec(x))
    if true_residual > 10 * target:
        raise SolverError("BiCGStab recurrence residual drifted from the true residual",
                          true_residual / b_norm, iterations)
    _report(info, iterations, true_residual / b_norm)
    logger.debug("BiCGStab converged in %d iterations (residual %.2e)", iterations, true_residual / b_norm)
    return x


def direct_solve_dense(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU with partial pivoting.

    Raises:
        SolverError: matrix singular to working precision
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SolverError(f"Dense solve needs a square matrix, got shape {A.shape}")
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    if pivots.min() <= np.finfo(float).eps * max(pivots.max(), np.abs(A).max()) * A.shape[0]:
        raise SolverError("Matrix is singular to working precision", breakdown=True)
    return scipy.linalg.lu_solve((lu, piv), np.asarray(b, dtype=float))


def _report(info: Optional[Dict[str, Any]], iterations: int, residual: float) -> None:
    if info is not None:
        info["iterations"] = iterations
        info["residual"] = residual
