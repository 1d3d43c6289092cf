"""Overlapping Schwarz preconditioners on Hilbert-curve subdomains and Krylov drivers."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import shift_operator
from .sfc import SfcDecomposition

log = logging.getLogger(__name__)

VARIANTS = ("one_level", "additive", "balanced")


class SingularFactorization(RuntimeError):
    pass


def _factorize(A: sp.spmatrix):
    try:
        return splu(sp.csc_matrix(A))
    except RuntimeError as exc:
        raise SingularFactorization(str(exc)) from exc


class SchwarzPreconditioner:
    """Additive overlapping Schwarz with an optional agglomeration coarse space.

    Parameters
    ----------
    A : sparse matrix
        Shifted system operator on the grid's interior nodes.
    decomposition : SfcDecomposition
        Curve-based overlapping subdomains and coarse chunks.
    variant : {"one_level", "additive", "balanced"}
        ``additive`` adds the coarse correction to the one-level sum,
        ``balanced`` wraps the one-level part in coarse projections.
    """

    def __init__(self, A, decomposition: SfcDecomposition, variant: str = "balanced"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown preconditioner variant {variant!r}")
        self.A = sp.csr_matrix(A)
        self.decomposition = decomposition
        self.variant = variant
        self.n = self.A.shape[0]
        if self.n != decomposition.grid.size:
            raise ValueError("operator and decomposition sizes differ")
        self.weights = decomposition.weights
        self.local = [_factorize(self.A[ext][:, ext]) for ext in decomposition.extended]
        self.Z = None
        self.coarse = None
        if variant != "one_level":
            self.Z = decomposition.coarse_restriction()
            self.coarse_matrix = (self.Z @ self.A @ self.Z.T).tocsc()
            self.coarse = _factorize(self.coarse_matrix)

    @property
    def shape(self):
        return (self.n, self.n)

    def apply_one_level(self, r: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n)
        for ext, w, lu in zip(self.decomposition.extended, self.weights, self.local):
            out[ext] += w * lu.solve(r[ext])
        return out

    def apply_coarse(self, r: np.ndarray, transpose: bool = False) -> np.ndarray:
        if self.coarse is None:
            raise ValueError("one-level preconditioner has no coarse space")
        rc = self.Z @ r
        return self.Z.T @ self.coarse.solve(rc, trans="T" if transpose else "N")

    def apply_additive(self, r: np.ndarray) -> np.ndarray:
        return self.apply_one_level(r) + self.apply_coarse(r)

    def apply_balanced(self, r: np.ndarray) -> np.ndarray:
        # G = I - A F,  G^T = I - F^T A^T
        Fr = self.apply_coarse(r)
        g = r - self.A @ Fr
        y = self.apply_one_level(g)
        return y - self.apply_coarse(self.A.T @ y, transpose=True) + Fr

    def __call__(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.variant == "one_level":
            return self.apply_one_level(r)
        if self.variant == "additive":
            return self.apply_additive(r)
        return self.apply_balanced(r)

    def matrix(self) -> np.ndarray:
        """Dense matrix of the preconditioner action (small problems only)."""
        eye = np.eye(self.n)
        return np.column_stack([self(eye[:, k]) for k in range(self.n)])


# -- Krylov solvers -------------------------------------------------------------


@dataclass
class KrylovReport:
    iterations: int
    final_residual_norm: float
    converged: bool
    breakdown: str | None = None


def _identity(r):
    return r


def _as_operator(op) -> Callable[[np.ndarray], np.ndarray]:
    return op if callable(op) and not sp.issparse(op) and not isinstance(op, np.ndarray) else (lambda x: op @ x)


def pcg(op, rhs, precond=None, tol: float = 1e-8, maxit: int = 1000, x0=None):
    """Preconditioned conjugate gradients to an absolute l2 residual ``tol``.

    Returns the iterate and a :class:`KrylovReport`; a non-positive curvature
    or preconditioned inner product is reported as breakdown.
    """
    A = _as_operator(op)
    M = precond or _identity
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - A(x) if x0 is not None else b.copy()
    rnorm = np.linalg.norm(r)
    if rnorm <= tol:
        return x, KrylovReport(0, float(rnorm), True)
    z = M(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        if rz <= 0:
            return x, KrylovReport(it - 1, float(rnorm), False, "preconditioner not positive definite")
        Ap = A(p)
        curv = p @ Ap
        if curv <= 0:
            return x, KrylovReport(it - 1, float(rnorm), False, "non-positive curvature")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= tol:
            r = b - A(x)
            rnorm = np.linalg.norm(r)
            if rnorm <= tol:
                return x, KrylovReport(it, float(rnorm), True)
        z = M(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, KrylovReport(maxit, float(rnorm), False)


def bicgstab(op, rhs, precond=None, tol: float = 1e-8, maxit: int = 1000, x0=None):
    """Right-preconditioned BiCGStab to an absolute l2 residual ``tol``.

    On a rho or omega breakdown the iteration restarts once from the current
    iterate; a second breakdown is reported.
    """
    A = _as_operator(op)
    M = precond or _identity
    b = np.asarray(rhs, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    restarted = False
    it = 0
    while True:
        r = b - A(x)
        rnorm = np.linalg.norm(r)
        if rnorm <= tol:
            return x, KrylovReport(it, float(rnorm), True)
        r_hat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros_like(b)
        p = np.zeros_like(b)
        breakdown = None
        while it < maxit:
            rho_new = r_hat @ r
            if rho_new == 0.0 or omega == 0.0:
                breakdown = "rho breakdown" if rho_new == 0.0 else "omega breakdown"
                break
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            p_hat = M(p)
            v = A(p_hat)
            denom = r_hat @ v
            if denom == 0.0:
                breakdown = "rho breakdown"
                break
            alpha = rho / denom
            x += alpha * p_hat
            s = r - alpha * v
            it += 1
            if np.linalg.norm(s) <= tol:
                rnorm = np.linalg.norm(b - A(x))
                if rnorm <= tol:
                    return x, KrylovReport(it, float(rnorm), True)
            s_hat = M(s)
            t = A(s_hat)
            tt = t @ t
            omega = (t @ s) / tt if tt > 0 else 0.0
            x += omega * s_hat
            r = s - omega * t
            rnorm = np.linalg.norm(r)
            if rnorm <= tol:
                rnorm = np.linalg.norm(b - A(x))
                if rnorm <= tol:
                    return x, KrylovReport(it, float(rnorm), True)
                r = b - A(x)
        if breakdown is None:
            return x, KrylovReport(it, float(rnorm), False)
        if restarted:
            return x, KrylovReport(it, float(rnorm), False, breakdown)
        log.debug("BiCGStab %s after %d iterations; restarting", breakdown, it)
        restarted = True


# -- shifted time-step systems --------------------------------------------------


def is_symmetric(A, rtol: float = 1e-12) -> bool:
    A = sp.csr_matrix(A)
    diff = abs(A - A.T)
    scale = abs(A).max() if A.nnz else 0.0
    return diff.nnz == 0 or diff.max() <= rtol * scale


def _dt_key(dt: float) -> float:
    # uniform partitions produce step sizes differing in the last bits
    return float(f"{dt:.12e}")


@dataclass
class KrylovStats:
    solves: int = 0
    iterations: list = None

    def __post_init__(self):
        self.iterations = [] if self.iterations is None else self.iterations

    def summary(self) -> dict:
        if not self.iterations:
            return {"solves": self.solves, "median": 0, "min": 0, "max": 0}
        it = np.asarray(self.iterations)
        return {"solves": self.solves, "median": float(np.median(it)), "min": int(it.min()), "max": int(it.max())}


class ShiftedSolver:
    """Solves ``(op + I/dt) x = b`` with factorizations cached per ``dt``.

    ``method="direct"`` uses one sparse LU per step size. ``method="dd"``
    builds a :class:`SchwarzPreconditioner` per step size and runs PCG
    (symmetric operators) or BiCGStab, warm-started from ``x0``.
    """

    def __init__(self, op, method: str = "direct", decomposition: SfcDecomposition | None = None,
                 variant: str | None = None, tol: float = 1e-8, maxit: int = 1000):
        if method not in ("direct", "dd"):
            raise ValueError(f"unknown spatial solver {method!r}")
        if method == "dd" and decomposition is None:
            raise ValueError("domain decomposition solver needs a decomposition")
        self.op = sp.csr_matrix(op)
        self.method = method
        self.decomposition = decomposition
        self.symmetric = is_symmetric(self.op)
        self.variant = variant or ("balanced" if self.symmetric else "additive")
        self.tol = tol
        self.maxit = maxit
        self.stats = KrylovStats()
        self._cache = {}
        self._lock = threading.Lock()

    def _prepared(self, dt: float):
        key = _dt_key(dt)
        with self._lock:
            entry = self._cache.get(key)
            if entry is None:
                A = shift_operator(self.op, dt)
                if self.method == "direct":
                    entry = (A, _factorize(A))
                else:
                    entry = (A, SchwarzPreconditioner(A, self.decomposition, self.variant))
                self._cache[key] = entry
        return entry

    def solve(self, dt: float, rhs, x0=None) -> np.ndarray:
        A, fac = self._prepared(dt)
        if self.method == "direct":
            return fac.solve(np.asarray(rhs, dtype=float))
        krylov = pcg if self.symmetric else bicgstab
        x, report = krylov(A, rhs, fac, tol=self.tol, maxit=self.maxit, x0=x0)
        with self._lock:
            self.stats.solves += 1
            self.stats.iterations.append(report.iterations)
        if not report.converged:
            raise SpatialSolverError(report)
        return x


class SpatialSolverError(RuntimeError):
    def __init__(self, report: KrylovReport):
        super().__init__(
            f"Krylov solve failed after {report.iterations} iterations "
            f"(residual {report.final_residual_norm:.3e}, {report.breakdown or 'maxit reached'})"
        )
        self.report = report
