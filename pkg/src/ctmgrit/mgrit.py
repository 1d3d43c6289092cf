"""Two-level multigrid reduction in time (FAS form) with C-point storage."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dd import ShiftedSolver

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimePartition:
    """Fine time points ``t_0 < ... < t_N`` with coarsening factor ``c``."""

    t: np.ndarray
    c: int = 2

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time partition needs at least two points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time points must be strictly increasing")
        if not isinstance(self.c, (int, np.integer)) or self.c < 2:
            raise ValueError(f"coarsening factor c must be an integer > 1, got {self.c}")
        if self.N % self.c:
            raise ValueError(f"N={self.N} is not divisible by the coarsening factor c={self.c}")

    @classmethod
    def uniform(cls, t_start: float, t_end: float, N: int, c: int = 2) -> "TimePartition":
        if N < 1:
            raise ValueError(f"need N >= 1 time steps, got {N}")
        return cls(np.linspace(t_start, t_end, N + 1), c)

    @property
    def N(self) -> int:
        return self.t.size - 1

    @property
    def n_coarse(self) -> int:
        return self.N // self.c

    @property
    def coarse_times(self) -> np.ndarray:
        return self.t[:: self.c]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    def is_c_point(self, n: int) -> bool:
        return n % self.c == 0

    def labels(self) -> str:
        return "".join("C" if self.is_c_point(n) else "F" for n in range(self.N + 1))

    def f_intervals(self) -> list[list[int]]:
        """F-point indices of each coarse interval ``[T_m, T_{m+1})``."""
        c = self.c
        return [list(range(c * m + 1, c * (m + 1))) for m in range(self.n_coarse)]

    def window(self, n0: int, n1: int) -> "TimePartition":
        return TimePartition(self.t[n0 : n1 + 1], self.c)


# -- propagators --------------------------------------------------------------


class Propagator:
    """Linear one-step map ``u_n = Phi_n u_{n-1} + g_n`` on a time grid.

    Subclasses implement :meth:`apply` (the homogeneous part) and
    :meth:`step`; :meth:`forcing` defaults to ``step(n, 0)``.
    """

    times: np.ndarray

    def step(self, n: int, u_prev: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, n: int, u_prev: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forcing(self, n: int) -> np.ndarray:
        return self.step(n, np.zeros(self.size))

    def residual(self, n: int, u_n, u_prev) -> np.ndarray:
        return u_n - self.step(n, u_prev)

    @property
    def size(self) -> int:
        raise NotImplementedError


class BackwardEuler(Propagator):
    """Implicit Euler for ``du/dt + A u = f(t)``.

    Each step solves ``(A + I/dt) u_n = u_{n-1}/dt + f(t_n)``.

    Parameters
    ----------
    solver : ShiftedSolver
        Shared solver for the shifted systems; its factorizations are
        cached per step size, so fine and coarse propagators may share it.
    times : array
        Time points ``t_0 < ... < t_N`` of this propagator.
    forcing : callable, optional
        ``forcing(t)`` returning the source vector at time ``t``.
    """

    def __init__(self, solver: ShiftedSolver, times, forcing: Callable[[float], np.ndarray] | None = None):
        self.solver = solver
        self.times = np.asarray(times, dtype=float)
        self.source = forcing

    @property
    def size(self) -> int:
        return self.solver.op.shape[0]

    def _dt(self, n: int) -> float:
        if not 1 <= n < self.times.size:
            raise IndexError(f"step {n} outside [1, {self.times.size - 1}]")
        return self.times[n] - self.times[n - 1]

    def step(self, n, u_prev):
        dt = self._dt(n)
        rhs = np.asarray(u_prev, dtype=float) / dt
        if self.source is not None:
            rhs = rhs + self.source(self.times[n])
        return self.solver.solve(dt, rhs, x0=u_prev)

    def apply(self, n, u_prev):
        dt = self._dt(n)
        return self.solver.solve(dt, np.asarray(u_prev, dtype=float) / dt, x0=u_prev)

    def forcing(self, n):
        dt = self._dt(n)
        if self.source is None:
            return np.zeros(self.size)
        return self.solver.solve(dt, self.source(self.times[n]))

    def coarse(self, partition: TimePartition) -> "BackwardEuler":
        """Same scheme on the coarse points of ``partition`` (step size c*dt)."""
        return BackwardEuler(self.solver, partition.coarse_times, self.source)


# -- space-time state -----------------------------------------------------------


@dataclass
class SpaceTimeState:
    """Values at the C points; ``f_last[m]`` caches the last F value of interval m."""

    partition: TimePartition
    c_values: list
    f_last: list | None = None

    @property
    def final(self) -> np.ndarray:
        return self.c_values[-1]

    def copy(self) -> "SpaceTimeState":
        f_last = None if self.f_last is None else [v.copy() for v in self.f_last]
        return SpaceTimeState(self.partition, [v.copy() for v in self.c_values], f_last)

    def fine_values(self, prop: Propagator) -> list:
        """All N+1 values, reconstructing F points by F-relaxation."""
        out = [self.c_values[0]]
        for m, interval in enumerate(self.partition.f_intervals()):
            u = self.c_values[m]
            for n in interval:
                u = prop.step(n, u)
                out.append(u)
            out.append(self.c_values[m + 1])
        return out


def initial_state(partition: TimePartition, u0) -> SpaceTimeState:
    """C-point guess: copies of the initial value."""
    u0 = np.asarray(u0, dtype=float)
    return SpaceTimeState(partition, [u0.copy() for _ in range(partition.n_coarse + 1)])


def sequential_solve(prop: Propagator, partition: TimePartition, u0) -> SpaceTimeState:
    """Forward substitution of the space-time system; the MGRIT oracle."""
    u = np.asarray(u0, dtype=float).copy()
    c_values = [u]
    f_last = []
    for n in range(1, partition.N + 1):
        prev = u
        u = prop.step(n, u)
        if partition.is_c_point(n):
            f_last.append(prev)
            c_values.append(u)
    return SpaceTimeState(partition, c_values, f_last)


def _relax_interval(prop, partition, u, m):
    for n in partition.f_intervals()[m]:
        u = prop.step(n, u)
    return u


def f_relax(prop: Propagator, partition: TimePartition, state: SpaceTimeState, pmap=map) -> SpaceTimeState:
    """Propagate every C value across its F points; intervals are independent."""
    m = range(partition.n_coarse)
    f_last = list(pmap(lambda k: _relax_interval(prop, partition, state.c_values[k], k), m))
    return replace(state, f_last=f_last)


def c_relax(prop: Propagator, partition: TimePartition, state: SpaceTimeState, pmap=map) -> SpaceTimeState:
    """Recompute each C value from the preceding F value."""
    if state.f_last is None:
        raise ValueError("C-relaxation needs F values; run f_relax first")
    c = partition.c
    new = list(pmap(lambda m: prop.step(c * (m + 1), state.f_last[m]), range(partition.n_coarse)))
    return SpaceTimeState(partition, [state.c_values[0]] + new, None)


def c_residuals(prop: Propagator, partition: TimePartition, state: SpaceTimeState, pmap=map) -> list:
    """``r_m = Phi(u_{cm-1}) + g - u_{cm}`` at C points m = 1..N/c."""
    c = partition.c
    return list(
        pmap(lambda m: prop.step(c * (m + 1), state.f_last[m]) - state.c_values[m + 1], range(partition.n_coarse))
    )


def relax(prop, partition, state, n_relax: int = 1, pmap=map) -> SpaceTimeState:
    """F-relaxation followed by ``n_relax`` CF sweeps."""
    state = f_relax(prop, partition, state, pmap)
    for _ in range(n_relax):
        state = f_relax(prop, partition, c_relax(prop, partition, state, pmap), pmap)
    return state


def coarse_correction(prop_coarse: Propagator, state: SpaceTimeState, residuals: Sequence[np.ndarray],
                      error_form: bool = False) -> SpaceTimeState:
    """Exact sequential coarse solve and injection of the error at C points.

    The FAS form solves ``B_c v = B_c u_c + r`` and corrects by ``v - u_c``.
    With ``error_form`` the linear error equation ``B_c e = r`` is solved
    directly instead.
    """
    U = state.c_values
    new = [U[0]]
    if error_form:
        e = np.zeros_like(U[0])
        for m in range(1, len(U)):
            e = prop_coarse.apply(m, e) + residuals[m - 1]
            new.append(U[m] + e)
    else:
        v = U[0]
        for m in range(1, len(U)):
            v = prop_coarse.apply(m, v) + (U[m] - prop_coarse.apply(m, U[m - 1])) + residuals[m - 1]
            new.append(U[m] + (v - U[m]))
    return SpaceTimeState(state.partition, new, None)


def two_level_cycle(prop_fine, prop_coarse, partition, state, n_relax: int = 1, error_form: bool = False,
                    pmap=map, norm=np.linalg.norm):
    """One two-level cycle; returns (new state, residual norm before correction)."""
    state = relax(prop_fine, partition, state, n_relax, pmap)
    residuals = c_residuals(prop_fine, partition, state, pmap)
    rnorm = max((float(norm(r)) for r in residuals), default=0.0)
    return coarse_correction(prop_coarse, state, residuals, error_form), rnorm, state


@dataclass
class MgritReport:
    iterations: int
    residual_norms: list = field(default_factory=list)
    converged: bool = False


class MgritDivergence(RuntimeError):
    pass


def mgrit_solve(prop_fine: Propagator, prop_coarse: Propagator, partition: TimePartition, u0,
                tol: float = 1e-8, maxit: int = 50, n_relax: int = 1, error_form: bool = False,
                pmap=map, norm=np.linalg.norm, state: SpaceTimeState | None = None,
                callback=None, raise_on_failure: bool = False):
    """Iterate two-level cycles until the C-point residual is below ``tol``.

    The residual is the maximum over C points of ``norm`` of the C-point
    residual, evaluated after relaxation. With ``tol=0`` exactly ``maxit``
    cycles are performed. ``callback(k, state)`` sees each corrected iterate.
    """
    if tol < 0:
        raise ValueError(f"tolerance must be >= 0, got {tol}")
    if maxit < 1:
        raise ValueError(f"maxit must be >= 1, got {maxit}")
    state = initial_state(partition, u0) if state is None else state
    report = MgritReport(0)
    for k in range(1, maxit + 1):
        corrected, rnorm, relaxed = two_level_cycle(
            prop_fine, prop_coarse, partition, state, n_relax, error_form, pmap, norm
        )
        report.iterations = k
        report.residual_norms.append(rnorm)
        log.debug("MGRIT iteration %d: residual %.3e", k, rnorm)
        if tol > 0 and rnorm <= tol:
            report.converged = True
            return relaxed, report
        state = corrected
        if callback is not None:
            callback(k, state)
    if raise_on_failure:
        raise MgritDivergence(f"MGRIT did not reach tol={tol} in {maxit} iterations (residual {rnorm:.3e})")
    return state, report
