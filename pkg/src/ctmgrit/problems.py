"""Problem library: manufactured heat equation, linear-SDE Fokker-Planck, CME Fokker-Planck."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.stats import multivariate_normal

from .grid import AnisoGrid, central_difference, kron_axis, negative_laplacian, second_difference

log = logging.getLogger(__name__)


# -- finite-difference pieces ---------------------------------------------------


def first_derivative(grid: AnisoGrid, j: int) -> sp.csr_matrix:
    return kron_axis(grid, {j: central_difference(grid.shape[j], grid.h[j])})


def second_derivative(grid: AnisoGrid, i: int, j: int) -> sp.csr_matrix:
    """Central approximation of d^2/dx_i dx_j (three-point for i == j)."""
    if i == j:
        return kron_axis(grid, {i: second_difference(grid.shape[i], grid.h[i])})
    return kron_axis(
        grid, {i: central_difference(grid.shape[i], grid.h[i]), j: central_difference(grid.shape[j], grid.h[j])}
    )


# -- heat equation --------------------------------------------------------------


@dataclass(frozen=True)
class HeatProblem:
    """``du/dt - Laplace u = f`` on the unit cube with a manufactured solution.

    ``u*(x, t) = sqrt(|x|^2 + t^2) exp(-t) prod_i sin(pi x_i)``.
    """

    d: int
    t_end: float = 1.0
    name: str = "heat"

    @property
    def lower(self):
        return (0.0,) * self.d

    @property
    def upper(self):
        return (1.0,) * self.d

    def exact(self, x, t: float) -> np.ndarray:
        x = np.atleast_2d(x)
        rho = np.sqrt(np.sum(x**2, axis=1) + t**2)
        return rho * np.exp(-t) * np.prod(np.sin(np.pi * x), axis=1)

    def source(self, x, t: float) -> np.ndarray:
        """Analytic ``(d/dt - Laplace) u*``."""
        x = np.atleast_2d(x)
        d = x.shape[1]
        r2 = np.sum(x**2, axis=1)
        rho = np.sqrt(r2 + t**2)
        sines = np.sin(np.pi * x)
        S = np.prod(sines, axis=1)
        grad_dot = np.zeros_like(S)
        for i in range(d):
            others = np.prod(np.delete(sines, i, axis=1), axis=1)
            grad_dot += x[:, i] / rho * np.pi * np.cos(np.pi * x[:, i]) * others
        lap_rho = d / rho - r2 / rho**3
        lap = S * lap_rho + 2 * grad_dot - rho * d * np.pi**2 * S
        return np.exp(-t) * ((t / rho - rho) * S - lap)

    def initial(self, x) -> np.ndarray:
        return self.exact(x, 0.0)

    def operator(self, grid: AnisoGrid) -> sp.csr_matrix:
        return assemble_heat_operator(grid)

    def forcing(self, grid: AnisoGrid):
        pts = grid.coordinates
        return lambda t: self.source(pts, t)


def assemble_heat_operator(grid: AnisoGrid) -> sp.csr_matrix:
    """Second-order negative Laplacian (symmetric positive definite)."""
    return negative_laplacian(grid)


# -- Fokker-Planck for linear SDEs ----------------------------------------------


def gaussian_pdf(x, mean, cov) -> np.ndarray:
    return np.atleast_1d(multivariate_normal(mean=mean, cov=cov).pdf(np.atleast_2d(x)))


@dataclass
class LinearSdeProblem:
    """Density of ``dX = theta X dt + sigma dW`` with Gaussian initial law N(M, C).

    The noise has autocorrelation ``2 D delta``, so ``H = 2 sigma D sigma^T``.
    """

    theta: np.ndarray
    sigma: np.ndarray
    D: np.ndarray
    M: np.ndarray
    C: np.ndarray
    lower: tuple
    upper: tuple
    name: str = "linear_sde"

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(self.theta.shape[0], -1)
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.M = np.asarray(self.M, dtype=float)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        d = self.theta.shape[0]
        if self.theta.shape != (d, d) or self.M.shape != (d,) or self.C.shape != (d, d):
            raise ValueError("theta, M and C must have consistent dimension")
        if self.D.shape != (self.sigma.shape[1],) * 2:
            raise ValueError("noise matrix D must be m x m for sigma of shape d x m")
        H = self.H
        if not np.allclose(H, H.T) or np.linalg.eigvalsh(H).min() < -1e-12 * max(1.0, abs(H).max()):
            raise ValueError("H = 2 sigma D sigma^T must be symmetric positive semidefinite")
        self.lower = tuple(float(a) for a in self.lower)
        self.upper = tuple(float(b) for b in self.upper)

    @property
    def d(self) -> int:
        return self.theta.shape[0]

    @property
    def H(self) -> np.ndarray:
        return 2.0 * self.sigma @ self.D @ self.sigma.T

    @classmethod
    def oscillator(cls, xi=0.05, omega0=1.0, noise=0.1, M=(5.0, 5.0), C=1.0 / 9.0, box=10.0):
        theta = [[0.0, 1.0], [-(omega0**2), -2.0 * xi * omega0]]
        return cls(theta, [[0.0], [1.0]], [[noise]], M, C * np.eye(2), (-box,) * 2, (box,) * 2, "oscillator")

    @classmethod
    def linear4d(cls, k=(1.0, 1.0, 1.0), c=(0.4, 0.4), noise=(0.2, 0.2), C=0.5, box=6.0):
        k1, k2, k3 = k
        theta = [
            [0.0, 1.0, 0.0, 0.0],
            [-(k1 + k2), -c[0], k2, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [k2, 0.0, -(k2 + k3), -c[1]],
        ]
        sigma = [[0, 0], [1, 0], [0, 0], [0, 1]]
        D = np.diag([2 * noise[0], 2 * noise[1]])
        return cls(theta, sigma, D, np.zeros(4), C * np.eye(4), (-box,) * 4, (box,) * 4, "linear4d")

    def initial(self, x) -> np.ndarray:
        return gaussian_pdf(x, self.M, self.C)

    def exact(self, x, t: float) -> np.ndarray:
        return gaussian_solution(self, t).density(x)

    def operator(self, grid: AnisoGrid) -> sp.csr_matrix:
        return assemble_fokker_planck_operator(grid, self)

    def forcing(self, grid: AnisoGrid):
        return None


def assemble_fokker_planck_operator(grid: AnisoGrid, problem: LinearSdeProblem) -> sp.csr_matrix:
    """``A u = sum_i d_i[(theta x)_i u] - 1/2 sum_ij H_ij d_ij u`` so that ``u_t + A u = 0``.

    Drift is kept in divergence form: central difference of the product.
    """
    x = grid.coordinates
    drift = x @ problem.theta.T
    H = problem.H
    d = grid.d
    A = sp.csr_matrix((grid.size, grid.size))
    for i in range(d):
        if np.any(drift[:, i] != 0):
            A = A + first_derivative(grid, i) @ sp.diags(drift[:, i])
    for i in range(d):
        for j in range(i, d):
            hij = H[i, j] if i == j else H[i, j] + H[j, i]
            if hij != 0:
                A = A - 0.5 * hij * second_derivative(grid, i, j)
    return A.tocsr()


@dataclass
class GaussianState:
    t: float
    mean: np.ndarray
    cov: np.ndarray

    def density(self, x) -> np.ndarray:
        return gaussian_pdf(x, self.mean, self.cov)


def _rk4_covariance(theta, H, cov, t0, t1, max_step):
    steps = max(1, int(np.ceil((t1 - t0) / max_step - 1e-12)))
    h = (t1 - t0) / steps
    rhs = lambda S: theta @ S + S @ theta.T + H
    for _ in range(steps):
        k1 = rhs(cov)
        k2 = rhs(cov + 0.5 * h * k1)
        k3 = rhs(cov + 0.5 * h * k2)
        k4 = rhs(cov + h * k3)
        cov = cov + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return cov


def gaussian_trajectory(problem: LinearSdeProblem, times: Sequence[float], max_step: float = 1e-3) -> list[GaussianState]:
    """Analytical laws at increasing ``times``; covariance by classical RK4.

    Integrates ``dS/dt = theta S + S theta^T + H`` from ``S(0) = C``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise ValueError("time must be non-negative")
    order = np.argsort(times, kind="stable")
    out = [None] * times.size
    cov, t_prev = problem.C.copy(), 0.0
    for k in order:
        t = times[k]
        if t > t_prev:
            cov = _rk4_covariance(problem.theta, problem.H, cov, t_prev, t, max_step)
            t_prev = t
        mean = scipy.linalg.expm(problem.theta * t) @ problem.M
        out[k] = GaussianState(float(t), mean, 0.5 * (cov + cov.T))
    return out


def gaussian_solution(problem: LinearSdeProblem, t: float, max_step: float = 1e-3) -> GaussianState:
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")
    return gaussian_trajectory(problem, [t], max_step)[0]


def stationary_covariance(problem: LinearSdeProblem) -> np.ndarray:
    """Solution of ``theta S + S theta^T + H = 0`` (stable theta)."""
    return scipy.linalg.solve_continuous_lyapunov(problem.theta, -problem.H)


def covariance_closed_form(problem: LinearSdeProblem, t: float) -> np.ndarray:
    """``S_inf + e^{theta t} (C - S_inf) e^{theta^T t}`` for stable theta."""
    S = stationary_covariance(problem)
    E = scipy.linalg.expm(problem.theta * t)
    return S + E @ (problem.C - S) @ E.T


# -- chemical master equation ------------------------------------------------------


@dataclass
class Reaction:
    nu: np.ndarray
    propensity: Callable[[np.ndarray], np.ndarray]  # (n, d) states -> (n,)
    label: str = ""

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=np.int64)


def _hill(c_num, c_den, power, *idx):
    def alpha(x):
        s = sum(x[:, i] for i in idx)
        return c_num / (c_den + s**power)

    return alpha


def _linear(rate, i):
    return lambda x: rate * x[:, i]


@dataclass
class CmeProblem:
    """Kramers-Moyal Fokker-Planck approximation of a reaction network."""

    reactions: list
    lower: tuple
    upper: tuple
    M: np.ndarray
    C: np.ndarray
    name: str = "cme"

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.lower = tuple(float(a) for a in self.lower)
        self.upper = tuple(float(b) for b in self.upper)
        for r in self.reactions:
            if r.nu.shape != (self.d,):
                raise ValueError(f"stoichiometric vector {r.nu} does not match d={self.d}")

    @property
    def d(self) -> int:
        return len(self.lower)

    @classmethod
    def toggle_switch_2d(cls, c1=3e3, c2=1.1e4, beta=2, c3=1e-3, c4=3e3, c5=1.1e4, gamma=2, c6=1e-3,
                         upper=399.0, mean=133.0, var=133.0):
        reactions = [
            Reaction([1, 0], _hill(c1, c2, beta, 1), "A -> 2A"),
            Reaction([-1, 0], _linear(c3, 0), "2A -> A"),
            Reaction([0, 1], _hill(c4, c5, gamma, 0), "B -> 2B"),
            Reaction([0, -1], _linear(c6, 1), "2B -> B"),
        ]
        return cls(reactions, (0.0, 0.0), (upper, upper), [mean] * 2, var * np.eye(2), "toggle2d")

    @classmethod
    def toggle_switch_3d(cls, c_prod=3e3, c_sat=1.1e4, power=2, c_decay=1e-3, upper=199.0, mean=133.0, var=133.0):
        reactions = [
            Reaction([1, 0, 0], _hill(c_prod, c_sat, power, 1, 2), "A -> 2A"),
            Reaction([-1, 0, 0], _linear(c_decay, 0), "2A -> A"),
            Reaction([0, 1, 0], _hill(c_prod, c_sat, power, 0, 2), "B -> 2B"),
            Reaction([0, -1, 0], _linear(c_decay, 1), "2B -> B"),
            Reaction([0, 0, 1], _hill(c_prod, c_sat, power, 0, 1), "C -> 2C"),
            Reaction([0, 0, -1], _linear(c_decay, 2), "2C -> C"),
        ]
        return cls(reactions, (0.0,) * 3, (upper,) * 3, [mean] * 3, var * np.eye(3), "toggle3d")

    def propensities(self, x) -> np.ndarray:
        """Propensities at states ``x`` (n, d) -> (n, m)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([r.propensity(x) for r in self.reactions])

    def initial(self, x) -> np.ndarray:
        return gaussian_pdf(x, self.M, self.C)

    def exact(self, x, t):
        return None

    def operator(self, grid: AnisoGrid) -> sp.csr_matrix:
        return assemble_cme_operator(grid, self)

    def forcing(self, grid: AnisoGrid):
        return None


def assemble_cme_operator(grid: AnisoGrid, problem: CmeProblem) -> sp.csr_matrix:
    """``A u = sum_r [nu_r . grad(a_r u) - 1/2 nu_r^T (grad grad (a_r u)) nu_r]``.

    Propensities are evaluated at the node coordinates, so every term is a
    difference matrix times ``diag(a_r)``.
    """
    a = problem.propensities(grid.coordinates)
    if np.any(a < 0):
        raise ValueError("negative propensity on the grid")
    d = grid.d
    D1 = [first_derivative(grid, i) for i in range(d)]
    D2 = {(i, j): second_derivative(grid, i, j) for i in range(d) for j in range(i, d)}
    A = sp.csr_matrix((grid.size, grid.size))
    for r, reaction in enumerate(problem.reactions):
        nu = reaction.nu
        local = sp.csr_matrix((grid.size, grid.size))
        for i in range(d):
            if nu[i]:
                local = local + nu[i] * D1[i]
            for j in range(i, d):
                w = nu[i] * nu[j] * (1 if i == j else 2)
                if w:
                    local = local - 0.5 * w * D2[i, j]
        A = A + local @ sp.diags(a[:, r])
    return A.tocsr()


@dataclass
class SsaResult:
    samples: np.ndarray  # final integer states, (trajectories, d)
    pmf: np.ndarray  # probability mass on the lattice [0, upper]^d
    events: int = 0

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def _ssa_chunk(problem: CmeProblem, x0, t_end, n, rng):
    nu = np.array([r.nu for r in problem.reactions])
    x = np.tile(np.asarray(x0, dtype=np.int64), (n, 1))
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    events = 0
    while active.any():
        idx = np.flatnonzero(active)
        a = problem.propensities(x[idx])
        if np.any(a < 0):
            raise ValueError("negative propensity at a visited state")
        a0 = a.sum(axis=1)
        tau = np.full(idx.size, np.inf)
        alive = a0 > 0
        tau[alive] = rng.exponential(1.0, alive.sum()) / a0[alive]
        u = rng.random(idx.size)
        t_new = t[idx] + tau
        fires = t_new <= t_end
        # direct method: pick reaction by cumulative propensity
        cum = np.cumsum(a[fires], axis=1)
        pick = np.minimum((cum < (u[fires] * a0[fires])[:, None]).sum(axis=1), nu.shape[0] - 1)
        x[idx[fires]] += nu[pick]
        t[idx[fires]] = t_new[fires]
        active[idx[~fires]] = False
        events += int(fires.sum())
    return x, events


def gillespie_ssa(problem: CmeProblem, x0, t_end: float, trajectories: int, seed: int = 0,
                  chunk: int = 4096, pmap=map) -> SsaResult:
    """Direct-method SSA, vectorized over trajectories.

    Trajectories are simulated in fixed-size chunks; chunk ``k`` draws from
    ``SeedSequence(seed, spawn_key=(k,))`` so results do not depend on how
    chunks are scheduled.
    """
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    sizes = [min(chunk, trajectories - s) for s in range(0, trajectories, chunk)]

    def run(k):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        return _ssa_chunk(problem, x0, t_end, sizes[k], rng)

    parts = list(pmap(run, range(len(sizes))))
    samples = np.concatenate([p[0] for p in parts])
    events = sum(p[1] for p in parts)
    shape = tuple(int(np.floor(u)) + 1 for u in problem.upper)
    shape = tuple(max(s, int(m) + 1) for s, m in zip(shape, samples.max(axis=0)))
    pmf = np.zeros(shape)
    np.add.at(pmf, tuple(np.clip(samples, 0, None).T), 1.0)
    return SsaResult(samples, pmf / trajectories, events)
