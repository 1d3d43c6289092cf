"""Config-driven experiment execution shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .combination import CombinationScheme, build_scheme
from .config import SCHEMA_VERSION, RunConfig
from .driver import ALGORITHMS, SolverOptions, make_plan, setup_subproblems
from .problems import CmeProblem, HeatProblem, LinearSdeProblem, gaussian_trajectory, gillespie_ssa

log = logging.getLogger(__name__)

PROBE_COLUMNS = ("t", "computed", "analytical", "abs_error")


class SolverFailure(RuntimeError):
    pass


def build_problem(config: RunConfig):
    prob = config["problem"]
    kind = prob["kind"]
    if kind == "heat":
        return HeatProblem(prob["d"])
    if kind == "oscillator":
        return LinearSdeProblem.oscillator(box=prob.get("box", 10.0))
    if kind == "linear4d":
        return LinearSdeProblem.linear4d(box=prob.get("box", 6.0))
    if kind == "linear_sde":
        return LinearSdeProblem(prob["theta"], prob["sigma"], prob["D"], prob["M"], prob["C"],
                                tuple(prob["lower"]), tuple(prob["upper"]))
    if kind == "toggle2d":
        return CmeProblem.toggle_switch_2d(upper=prob.get("upper", 399.0))
    return CmeProblem.toggle_switch_3d(upper=prob.get("upper", 199.0))


def build_scheme_for(config: RunConfig, problem) -> CombinationScheme:
    sg = config["sparse_grid"]
    scheme = build_scheme(problem.d, sg["L"], sg["L0"], problem.lower, problem.upper)
    if config.algorithm.startswith("full_grid"):
        level = config.get("run", "full_grid_level") or analysis.isotropic_level_like(scheme)
        scheme = CombinationScheme.single(tuple(level), problem.lower, problem.upper)
    return scheme


def solver_options(config: RunConfig, parallel_degree: int | None = None) -> SolverOptions:
    sp_, mg = config["spatial"], config["mgrit"]
    return SolverOptions(
        spatial=sp_["solver"], gamma=sp_["gamma"], q=sp_.get("q"), variant=sp_.get("variant"),
        spatial_tol=sp_["tol"], spatial_maxit=sp_["maxit"], mgrit_tol=mg["tol"], mgrit_maxit=mg["maxit"],
        n_relax=mg["n_relax"], stopping=mg["stopping"],
        parallel_degree=parallel_degree or config["run"]["parallel_degree"],
    )


@dataclass
class Experiment:
    config: RunConfig
    problem: object
    scheme: CombinationScheme
    plan: object
    result: object = None
    probe_point: object = None
    summary: dict = field(default_factory=dict)
    probe_rows: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


def prepare(config: RunConfig) -> Experiment:
    problem = build_problem(config)
    scheme = build_scheme_for(config, problem)
    t = config["time"]
    plan = make_plan(scheme, t["t_start"], config.t_end(), config.n_steps(), t["s"], config["mgrit"]["c"],
                     config["spatial"]["S"], config["run"]["Pt"])
    return Experiment(config, problem, scheme, plan)


def _algorithm(name: str):
    return {"full_grid_sequential": ALGORITHMS["sequential_ct"],
            "full_grid_mgrit": ALGORITHMS["ctmgrit_loc"]}.get(name) or ALGORITHMS[name]


def execute(exp: Experiment, parallel_degree: int | None = None, probe_point=None) -> Experiment:
    cfg = exp.config
    options = solver_options(cfg, parallel_degree)
    probe_point = probe_point if probe_point is not None else cfg.get("run", "probe")
    t0 = time.perf_counter()
    subs = setup_subproblems(exp.plan, exp.problem, options)
    t1 = time.perf_counter()
    exp.result = _algorithm(cfg.algorithm)(exp.plan, exp.problem, options, probe_point=probe_point, subproblems=subs)
    t2 = time.perf_counter()
    exp.timings = {"setup": t1 - t0, "solve": t2 - t1}
    exp.probe_point = probe_point
    exp.probe_rows = probe_rows(exp) if probe_point is not None else []
    exp.summary = summarize(exp)
    if isinstance(exp.problem, CmeProblem):
        exp.summary["modes"] = compare_modes(exp, options.parallel_degree)
    exp.timings["postprocess"] = time.perf_counter() - t2
    return exp


def run_config(config: RunConfig, parallel_degree: int | None = None, probe_point=None) -> Experiment:
    return execute(prepare(config), parallel_degree, probe_point)


# -- errors and summaries ------------------------------------------------------------


def node_error(scheme, states, exact, t) -> float:
    """Max over all sparse-grid nodes of the combined solution's pointwise error."""
    return max(float(np.abs(u - exact(g.coordinates, t)).max()) for g, u in zip(scheme.grids, states))


def sample_error(scheme, states, exact, t, n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(scheme.lower), np.asarray(scheme.upper)
    x = lo + (hi - lo) * rng.random((n, scheme.d))
    from .combination import evaluate_combined

    return float(np.abs(evaluate_combined(scheme, states, x) - exact(x, t)).max())


def probe_rows(exp: Experiment) -> list[tuple]:
    """(t, computed, analytical, abs_error) per probe time; analytical is None without an oracle."""
    r, pt = exp.result, np.asarray(exp.probe_point, dtype=float)
    if isinstance(exp.problem, LinearSdeProblem):
        exact = [float(g.density(pt[None])[0]) for g in gaussian_trajectory(exp.problem, r.probe_times)]
    elif isinstance(exp.problem, HeatProblem):
        exact = [float(exp.problem.exact(pt[None], t)[0]) for t in r.probe_times]
    else:
        exact = [None] * len(r.probe_times)
    return [(float(t), float(v), a, None if a is None else abs(v - a))
            for t, v, a in zip(r.probe_times, r.probe_values, exact)]


def summarize(exp: Experiment) -> dict:
    cfg, r, scheme, problem = exp.config, exp.result, exp.scheme, exp.problem
    t_end = float(exp.plan.partitions[0].t[-1])
    errors = {}
    if isinstance(problem, HeatProblem):
        errors["manufactured"] = {
            "max_node_error": node_error(scheme, r.states, problem.exact, t_end),
            "max_sample_error": sample_error(scheme, r.states, problem.exact, t_end,
                                             cfg["run"]["error_samples"], cfg["run"]["seed"]),
        }
    elif isinstance(problem, LinearSdeProblem):
        law = gaussian_trajectory(problem, [t_end])[0]
        errors["gaussian_analytical"] = {"max_node_error": node_error(scheme, r.states, lambda x, t: law.density(x), t_end)}
    mass0 = analysis.combined_mass(scheme, [g.sample(problem.initial) for g in scheme.grids])
    mass1 = analysis.combined_mass(scheme, r.states)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "problem": cfg["problem"]["kind"],
        "scheme": [{"level": list(e.level), "coefficient": e.coefficient} for e in scheme.entries],
        "resources": {
            "Px": list(exp.plan.Px),
            "Pt": list(exp.plan.Pt),
            "tasks_loc": exp.plan.tasks_loc,
            "tasks_sg": exp.plan.tasks_sg,
        },
        "time": {"t_end": t_end, "N": [p.N for p in exp.plan.partitions], "s": exp.plan.schedule.s,
                 "taus": [float(x) for x in exp.plan.schedule.taus]},
        "mgrit_iterations": r.mgrit_iterations,
        "krylov": r.krylov,
        "errors": errors,
        "mass": {"initial": mass0, "final": mass1, "relative_change": (mass1 - mass0) / mass0 if mass0 else None},
        "converged": bool(r.converged),
        "failure": r.failure,
    }
    rows = exp.probe_rows
    if rows and rows[0][2] is not None:
        oracle = "gaussian_analytical" if isinstance(problem, LinearSdeProblem) else "manufactured"
        errors.setdefault(oracle, {})["max_probe_error"] = max(row[3] for row in rows)
    return summary


# -- SSA comparison -----------------------------------------------------------------


def lattice_axes(problem) -> list[np.ndarray]:
    """Integer copy-number lattice covering the problem box."""
    return [np.arange(int(np.ceil(a)), int(np.floor(b)) + 1, dtype=float) for a, b in zip(problem.lower, problem.upper)]


def split_modes(values: np.ndarray, axes, sigma: float) -> np.ndarray:
    """Location of the maximum of the smoothed density on each side of the diagonal x1 = x2.

    ``values`` lives on the tensor grid ``axes``; ``sigma`` is the Gaussian
    smoothing width in coordinate units (the same filter is applied to every
    density being compared). Only the first two coordinates are split.
    """
    from scipy.ndimage import gaussian_filter

    step = axes[0][1] - axes[0][0]
    smooth = gaussian_filter(np.asarray(values, dtype=float), sigma / step, mode="constant")
    mesh = np.meshgrid(*axes, indexing="ij")
    modes = []
    for side in (mesh[0] > mesh[1], mesh[0] < mesh[1]):
        k = int(np.argmax(np.where(side, smooth, -np.inf)))
        modes.append([m.ravel()[k] for m in mesh])
    return np.array(modes)


def ssa_density(problem: CmeProblem, trajectories: int, t_end: float, seed: int, parallel_degree: int = 1):
    """Normalized SSA histogram on the integer lattice, started from the rounded initial mean."""
    from .driver import task_pool

    x0 = np.rint(problem.M).astype(np.int64)
    with task_pool(parallel_degree) as pmap:
        return gillespie_ssa(problem, x0, t_end, trajectories, seed, pmap=pmap)


def compare_modes(exp: Experiment, parallel_degree: int = 1) -> dict:
    """Bimodality of the combined density and, with an [ssa] section, agreement with SSA modes."""
    axes, values = ct_density(exp)
    width = float(max(b - a for a, b in zip(exp.scheme.lower, exp.scheme.upper)))
    sigma = float(max(g.h.max() for g in exp.scheme.grids))
    peaks = analysis.local_maxima(values, size=5, rel_height=0.05)
    out = {
        "local_maxima": [[float(axes[j][i[j]]) for j in range(len(axes))] for i in peaks[:10]],
        "smoothing_width": sigma,
        "ct_modes": split_modes(values, axes, sigma).tolist(),
    }
    ssa = exp.config.data.get("ssa")
    if ssa:
        res = ssa_density(exp.problem, ssa["trajectories"], float(exp.plan.partitions[0].t[-1]), ssa["seed"],
                          parallel_degree)
        ssa_axes = [np.arange(n, dtype=float) for n in res.pmf.shape]
        out["ssa_modes"] = split_modes(res.pmf, ssa_axes, sigma).tolist()
        diff = np.abs(np.array(out["ct_modes"]) - np.array(out["ssa_modes"])).max()
        out["max_mode_distance_rel"] = float(diff / width)
        out["ssa_trajectories"] = int(ssa["trajectories"])
    return out


def ct_density(exp: Experiment, axes=None):
    axes = axes if axes is not None else lattice_axes(exp.problem)
    return axes, analysis.sample_combined(exp.scheme, exp.result.states, axes)


# -- convergence studies ----------------------------------------------------------------


def convergence_study(config: RunConfig, levels, parallel_degree: int | None = None) -> list[dict]:
    """Error of the combined solution against the available oracle for each level."""
    if len(levels) < 3:
        raise ValueError("a convergence study needs at least three levels")
    rows = []
    for L in levels:
        exp = run_config(config.with_overrides({"sparse_grid.L": int(L)}), parallel_degree)
        errs = exp.summary["errors"]
        oracle = next(iter(errs)) if errs else None
        if oracle is None:
            raise ValueError("problem has no analytical oracle for a convergence study")
        rows.append({"L": int(L), "oracle": oracle, "error": errs[oracle]["max_node_error"],
                     "nodes": exp.scheme.total_nodes(), "converged": exp.summary["converged"]})
    order = analysis.observed_order([r["L"] for r in rows], [r["error"] for r in rows])
    d = rows and config["problem"]["d"]
    corrected = analysis.observed_order([r["L"] for r in rows], [r["error"] / r["L"] ** (d - 1) for r in rows])
    for r in rows:
        r["observed_order"] = order
        r["order_without_log_factor"] = corrected
    return rows


# -- output -------------------------------------------------------------------------


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def write_outputs(exp: Experiment, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = [out_dir / "summary.json", out_dir / "metadata.json"]
    atomic_write(paths[0], to_json(exp.summary))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config_source": exp.config.source,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "wall_time_s": exp.timings,
        "parallel_degree": exp.config["run"]["parallel_degree"],
    }
    atomic_write(paths[1], to_json(meta))
    if exp.probe_rows:
        paths.append(out_dir / "probe.csv")
        atomic_write(paths[-1], to_csv(PROBE_COLUMNS, exp.probe_rows))
    return paths
