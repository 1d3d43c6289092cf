"""Combination technique in time: sequential stepping, per-subproblem MGRIT, sparse-grid MGRIT."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .combination import CombinationScheme, interpolate, point_weights, recombine
from .dd import ShiftedSolver
from .mgrit import (
    BackwardEuler,
    Propagator,
    SpaceTimeState,
    TimePartition,
    initial_state,
    mgrit_solve,
    two_level_cycle,
)
from .sfc import choose_subdomain_count, partition

log = logging.getLogger(__name__)


# -- plans ------------------------------------------------------------------------


@dataclass(frozen=True)
class RecombinationSchedule:
    """Recombination times ``tau_0 < ... < tau_s`` and per-subproblem step indices."""

    taus: np.ndarray
    index: tuple  # index[l][k] = n(l, k)

    @property
    def s(self) -> int:
        return len(self.taus) - 1

    @classmethod
    def build(cls, taus, partitions: Sequence[TimePartition]) -> "RecombinationSchedule":
        taus = np.asarray(taus, dtype=float)
        if taus.size < 2 or np.any(np.diff(taus) <= 0):
            raise ValueError("recombination times must be strictly increasing, at least two")
        index = []
        for l, p in enumerate(partitions):
            scale = max(1.0, abs(p.t).max())
            row = []
            for tau in taus:
                hits = np.flatnonzero(np.abs(p.t - tau) <= 1e-12 * scale)
                if hits.size != 1:
                    raise ValueError(f"recombination time {tau} is not a time point of subproblem {l}")
                row.append(int(hits[0]))
            if row[0] != 0 or row[-1] != p.N:
                raise ValueError("recombination times must start and end with the time interval")
            index.append(tuple(row))
        return cls(taus, tuple(index))


@dataclass
class RunPlan:
    scheme: CombinationScheme
    S: int
    Pt: tuple  # temporal speedup per subproblem
    Px: tuple  # spatial subdomains per subproblem
    partitions: list | None = None
    schedule: RecombinationSchedule | None = None

    @property
    def tasks_loc(self) -> int:
        return int(sum(pt * px for pt, px in zip(self.Pt, self.Px)))

    @property
    def tasks_sg(self) -> int:
        if len(set(self.Pt)) != 1:
            raise ValueError("the sparse-grid variant uses one temporal speedup for all subproblems")
        return int(self.Pt[0] * sum(self.Px))

    def subproblem_tasks(self) -> list[int]:
        return [int(pt * px) for pt, px in zip(self.Pt, self.Px)]


def plan_resources(scheme: CombinationScheme, S: int, Pt) -> RunPlan:
    """Spatial subdomain counts ``ceil(|grid_l| / 2**S)`` and temporal speedups."""
    Pt = tuple(int(p) for p in (Pt if np.ndim(Pt) else [Pt] * len(scheme)))
    if len(Pt) != len(scheme) or min(Pt) < 1:
        raise ValueError("need one positive temporal speedup per subproblem")
    with warnings.catch_warnings():
        # small desk-scale grids legitimately fall back to one subdomain
        warnings.simplefilter("ignore", UserWarning)
        Px = tuple(choose_subdomain_count(lev, S) for lev in scheme.levels)
    return RunPlan(scheme, S, Pt, Px)


def make_plan(scheme: CombinationScheme, t_start: float, t_end: float, N, s: int = 1, c: int = 2,
              S: int = 10, Pt=1) -> RunPlan:
    """Uniform partitions with ``N`` steps (scalar or per subproblem) and ``s`` windows."""
    plan = plan_resources(scheme, S, Pt)
    Ns = [int(n) for n in (N if np.ndim(N) else [N] * len(scheme))]
    if len(Ns) != len(scheme):
        raise ValueError("need one step count per subproblem")
    if s < 1:
        raise ValueError(f"need s >= 1 recombination windows, got {s}")
    for l, n in enumerate(Ns):
        if n % s or (n // s) % c:
            raise ValueError(
                f"subproblem {l}: N={n} must split into s={s} windows whose lengths are divisible by c={c}"
            )
    plan.partitions = [TimePartition.uniform(t_start, t_end, n, c) for n in Ns]
    plan.schedule = RecombinationSchedule.build(np.linspace(t_start, t_end, s + 1), plan.partitions)
    return plan


# -- solver options and per-subproblem setup ---------------------------------------


@dataclass
class SolverOptions:
    spatial: str = "direct"  # or "dd"
    gamma: float = 0.5
    q: int | None = None  # default 2**(S-4)
    variant: str | None = None
    spatial_tol: float = 1e-8
    spatial_maxit: int = 1000
    mgrit_tol: float = 1e-8
    mgrit_maxit: int = 50
    n_relax: int = 1
    stopping: str = "local"  # or "global"
    parallel_degree: int = 1

    def __post_init__(self):
        if self.stopping not in ("local", "global"):
            raise ValueError(f"stopping must be 'local' or 'global', got {self.stopping!r}")
        if self.parallel_degree < 1:
            raise ValueError("parallel_degree must be >= 1")


@contextmanager
def task_pool(degree: int):
    if degree <= 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=degree) as pool:
        yield pool.map


@dataclass
class Subproblem:
    grid: object
    solver: ShiftedSolver
    forcing: object
    Px: int

    def propagator(self, times) -> BackwardEuler:
        return BackwardEuler(self.solver, times, self.forcing)


def setup_subproblems(plan: RunPlan, problem, options: SolverOptions) -> list[Subproblem]:
    subs = []
    for grid, px in zip(plan.scheme.grids, plan.Px):
        op = problem.operator(grid)
        decomposition = None
        if options.spatial == "dd":
            P = min(px, grid.size)
            sizes_min = grid.size // P
            q = options.q if options.q is not None else 2 ** max(plan.S - 4, 0)
            decomposition = partition(grid, P, options.gamma, max(1, min(q, sizes_min)))
        solver = ShiftedSolver(op, options.spatial, decomposition, options.variant,
                               options.spatial_tol, options.spatial_maxit)
        subs.append(Subproblem(grid, solver, problem.forcing(grid), px))
    return subs


# -- results and probes -------------------------------------------------------------


@dataclass
class CtResult:
    states: list  # per-subproblem values at T_end after the final recombination
    mgrit_iterations: list = field(default_factory=list)  # [window][subproblem]
    residual_history: list = field(default_factory=list)
    probe_times: list = field(default_factory=list)
    probe_values: list = field(default_factory=list)
    krylov: list = field(default_factory=list)
    converged: bool = True
    failure: str | None = None


class Probe:
    """Combined solution value at one point, from per-subproblem nodal vectors."""

    def __init__(self, scheme: CombinationScheme, point):
        self.point = np.asarray(point, dtype=float)
        self.coefficients = scheme.coefficients
        self.weights = [point_weights(g, self.point) for g in scheme.grids]

    def __call__(self, states) -> float:
        total = 0.0
        for c, (idx, w), v in zip(self.coefficients, self.weights, states):
            total += c * float(w @ v[idx]) if idx.size else 0.0
        return total


def _common_probe_times(plan: RunPlan) -> set:
    """Times that are C points of every subproblem partition."""
    sets = [set(p.coarse_times.tolist()) for p in plan.partitions]
    return set.intersection(*sets)


def _record(result: CtResult, probe: Probe | None, t: float, states):
    if probe is not None:
        result.probe_times.append(float(t))
        result.probe_values.append(probe(states))


def _collect_probes(result, probe, plan, per_sub_values: list[dict]):
    if probe is None:
        return
    times = sorted(set.intersection(*[set(v) for v in per_sub_values]))
    for t in times:
        _record(result, probe, t, [v[t] for v in per_sub_values])


# -- sequential time stepping between recombinations --------------------------


def _initial_combined(plan: RunPlan, problem, pmap):
    return recombine(plan.scheme, interpolate(plan.scheme, problem.initial), pmap)


def solve_sequential_ct(plan: RunPlan, problem, options: SolverOptions | None = None, probe_point=None,
                        subproblems=None) -> CtResult:
    """Project, propagate each subproblem sequentially to the next tau, recombine."""
    options = options or SolverOptions()
    subs = subproblems or setup_subproblems(plan, problem, options)
    sched = plan.schedule
    probe = Probe(plan.scheme, probe_point) if probe_point is not None else None
    common = _common_probe_times(plan)
    result = CtResult([])
    with task_pool(options.parallel_degree) as pmap:
        states = _initial_combined(plan, problem, pmap)
        _record(result, probe, sched.taus[0], states)
        for k in range(1, sched.s + 1):

            def advance(l):
                p, sub = plan.partitions[l], subs[l]
                prop = sub.propagator(p.t)
                n0, n1 = sched.index[l][k - 1], sched.index[l][k]
                u, seen = states[l], {}
                for n in range(n0 + 1, n1 + 1):
                    u = prop.step(n, u)
                    if probe is not None and n < n1 and p.t[n] in common:
                        seen[p.t[n]] = u
                return u, seen

            out = list(pmap(advance, range(len(subs))))
            _collect_probes(result, probe, plan, [o[1] for o in out])
            states = recombine(plan.scheme, [o[0] for o in out], pmap)
            _record(result, probe, sched.taus[k], states)
    result.states = states
    result.krylov = [s.solver.stats.summary() for s in subs]
    return result


# -- MGRIT per subproblem ---------------------------------------------------------


def _window(plan, subs, l, k):
    p = plan.partitions[l]
    n0, n1 = plan.schedule.index[l][k - 1], plan.schedule.index[l][k]
    window = p.window(n0, n1)
    fine = subs[l].propagator(window.t)
    return window, fine, fine.coarse(window)


def _c_point_probes(window: TimePartition, state: SpaceTimeState, common) -> dict:
    return {t: v for t, v in zip(window.coarse_times[1:-1], state.c_values[1:-1]) if t in common}


def solve_ctmgrit_loc(plan: RunPlan, problem, options: SolverOptions | None = None, probe_point=None,
                      iterate_hook=None, subproblems=None) -> CtResult:
    """Per-subproblem two-level MGRIT on every recombination window.

    With ``options.stopping == "local"`` each subproblem iterates until its
    own residual is below tolerance. ``"global"`` advances all subproblems in
    lockstep and stops on the maximum residual over subproblems;
    ``iterate_hook(k, window, states)`` then sees every iterate.
    """
    options = options or SolverOptions()
    subs = subproblems or setup_subproblems(plan, problem, options)
    sched = plan.schedule
    probe = Probe(plan.scheme, probe_point) if probe_point is not None else None
    common = _common_probe_times(plan)
    result = CtResult([])
    with task_pool(options.parallel_degree) as pmap:
        states = _initial_combined(plan, problem, pmap)
        _record(result, probe, sched.taus[0], states)
        for k in range(1, sched.s + 1):
            setups = [_window(plan, subs, l, k) for l in range(len(subs))]
            if options.stopping == "local":

                def run(l):
                    window, fine, coarse = setups[l]
                    return mgrit_solve(fine, coarse, window, states[l], tol=options.mgrit_tol,
                                       maxit=options.mgrit_maxit, n_relax=options.n_relax)

                out = list(pmap(run, range(len(subs))))
                finals = [o[0] for o in out]
                reports = [o[1] for o in out]
                iters = [r.iterations for r in reports]
                result.residual_history.append([r.residual_norms for r in reports])
                ok = all(r.converged for r in reports) or options.mgrit_tol == 0
                failed = [l for l, r in enumerate(reports) if not r.converged]
            else:
                finals, iters, history, ok = _lockstep(setups, states, options, pmap, iterate_hook, k)
                result.residual_history.append(history)
                failed = [] if ok else list(range(len(subs)))
            result.mgrit_iterations.append(iters)
            if not ok:
                result.converged = False
                result.failure = f"MGRIT did not converge in window {k} (subproblems {failed})"
                log.warning(result.failure)
            _collect_probes(result, probe, plan,
                            [_c_point_probes(setups[l][0], finals[l], common) for l in range(len(subs))])
            states = recombine(plan.scheme, [f.final for f in finals], pmap)
            _record(result, probe, sched.taus[k], states)
    result.states = states
    result.krylov = [s.solver.stats.summary() for s in subs]
    return result


def _lockstep(setups, u0s, options, pmap, hook, window_index):
    n = len(setups)
    cur = [initial_state(setups[l][0], u0s[l]) for l in range(n)]
    history = []
    for it in range(1, options.mgrit_maxit + 1):

        def cycle(l):
            window, fine, coarse = setups[l]
            return two_level_cycle(fine, coarse, window, cur[l], options.n_relax)

        out = list(pmap(cycle, range(n)))
        rnorm = max(o[1] for o in out)
        history.append(rnorm)
        if options.mgrit_tol > 0 and rnorm <= options.mgrit_tol:
            return [o[2] for o in out], it, history, True
        cur = [o[0] for o in out]
        if hook is not None:
            hook(it, window_index, cur)
    return cur, options.mgrit_maxit, history, options.mgrit_tol == 0


# -- one MGRIT on the block system of all subproblems ------------------------------


class BlockPropagator(Propagator):
    """Block-diagonal propagator over all subproblems, recombining at selected inputs.

    ``step(n, u)`` first recombines ``u`` when ``n - 1`` is listed in
    ``recombine_after``, then advances every block.
    """

    def __init__(self, props, scheme: CombinationScheme, recombine_after=(), pmap=map):
        self.props = props
        self.scheme = scheme
        self.recombine_after = frozenset(recombine_after)
        self.sizes = [g.size for g in scheme.grids]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.times = props[0].times
        self.pmap = pmap

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def split(self, u) -> list:
        return [u[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def _blocks(self, n, u):
        blocks = self.split(np.asarray(u, dtype=float))
        if n - 1 in self.recombine_after:
            blocks = recombine(self.scheme, blocks)
        return blocks

    def step(self, n, u):
        blocks = self._blocks(n, u)
        return np.concatenate(list(self.pmap(lambda l: self.props[l].step(n, blocks[l]), range(len(blocks)))))

    def apply(self, n, u):
        blocks = self._blocks(n, u)
        return np.concatenate(list(self.pmap(lambda l: self.props[l].apply(n, blocks[l]), range(len(blocks)))))

    def block_norm(self, r) -> float:
        return max(float(np.linalg.norm(b)) for b in self.split(r))


def solve_ctmgrit_sg(plan: RunPlan, problem, options: SolverOptions | None = None, probe_point=None,
                     iterate_hook=None, subproblems=None) -> CtResult:
    """Global MGRIT with propagator ``Phi o Q``; all subproblems share one partition.

    The initial state is the recombined projection. Recombination inside the
    space-time system happens on the inputs at ``n(k)``, ``1 <= k <= s-1``,
    which must be C points; the result at ``T_end`` is recombined once more.
    """
    options = options or SolverOptions()
    parts = plan.partitions
    if any(p.N != parts[0].N or p.c != parts[0].c or not np.allclose(p.t, parts[0].t, rtol=0, atol=1e-12)
           for p in parts):
        raise ValueError("the sparse-grid variant requires one time partition for all subproblems")
    part = parts[0]
    n_k = plan.schedule.index[0]
    inner = list(n_k[1:-1])
    if any(not part.is_c_point(n) for n in inner):
        raise ValueError("recombination times must be C points of the shared partition")
    subs = subproblems or setup_subproblems(plan, problem, options)
    probe = Probe(plan.scheme, probe_point) if probe_point is not None else None
    result = CtResult([])
    with task_pool(options.parallel_degree) as pmap:
        states = _initial_combined(plan, problem, pmap)
        fine = BlockPropagator([s.propagator(part.t) for s in subs], plan.scheme, inner, pmap)
        coarse = BlockPropagator([s.propagator(part.coarse_times) for s in subs], plan.scheme,
                                 [n // part.c for n in inner], pmap)
        u0 = np.concatenate(states)
        hook = None if iterate_hook is None else (lambda it, st: iterate_hook(it, 1, [
            SpaceTimeState(part, [fine.split(v)[l] for v in st.c_values]) for l in range(len(subs))]))
        final, report = mgrit_solve(fine, coarse, part, u0, tol=options.mgrit_tol, maxit=options.mgrit_maxit,
                                    n_relax=options.n_relax, norm=fine.block_norm, callback=hook)
        result.mgrit_iterations.append([report.iterations])
        result.residual_history.append(report.residual_norms)
        if not report.converged and options.mgrit_tol > 0:
            result.converged = False
            result.failure = f"sparse-grid MGRIT did not converge in {options.mgrit_maxit} iterations"
            log.warning(result.failure)
        if probe is not None:
            _record(result, probe, part.t[0], states)
            for m in range(1, part.n_coarse + 1):
                blocks = fine.split(final.c_values[m])
                if m * part.c in inner:
                    blocks = recombine(plan.scheme, blocks)
                if m < part.n_coarse:
                    _record(result, probe, part.coarse_times[m], blocks)
        states = recombine(plan.scheme, fine.split(final.final), pmap)
        if probe is not None:
            _record(result, probe, part.t[-1], states)
    result.states = states
    result.krylov = [s.solver.stats.summary() for s in subs]
    return result


ALGORITHMS = {
    "sequential_ct": solve_sequential_ct,
    "ctmgrit_loc": solve_ctmgrit_loc,
    "ctmgrit_sg": solve_ctmgrit_sg,
}
