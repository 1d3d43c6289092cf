"""Run configuration: TOML loading, defaults and cross-field validation."""

from __future__ import annotations

import copy
import os
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ENV = "CTMGRIT_OUTPUT_DIR"
SCHEMA_VERSION = 1

ALGORITHMS = ("sequential_ct", "ctmgrit_loc", "ctmgrit_sg", "full_grid_sequential", "full_grid_mgrit")
PROBLEMS = ("heat", "oscillator", "linear4d", "linear_sde", "toggle2d", "toggle3d")
VARIANTS = ("one_level", "additive", "balanced")

DEFAULTS = {
    "problem": {},
    "sparse_grid": {"L0": 1},
    "time": {"t_start": 0.0, "s": 1},
    "mgrit": {"c": 2, "n_relax": 1, "tol": 1e-8, "maxit": 50, "stopping": "local"},
    "spatial": {"solver": "direct", "S": 10, "gamma": 0.5, "tol": 1e-8, "maxit": 1000},
    "run": {"algorithm": "ctmgrit_loc", "Pt": 1, "parallel_degree": 1, "seed": 0, "error_samples": 2000},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    data: dict
    source: str | None = None

    def __getitem__(self, section):
        return self.data[section]

    def get(self, section, key, default=None):
        return self.data.get(section, {}).get(key, default)

    @property
    def algorithm(self) -> str:
        return self.data["run"]["algorithm"]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        data = copy.deepcopy(self.data)
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"{dotted}: override keys must look like section.key")
            data.setdefault(section, {})[key] = value
        return validate(data, self.source)

    def output_dir(self, override: str | None = None) -> Path:
        if override:
            return Path(override)
        out = self.get("run", "output_dir")
        if out:
            return Path(out)
        return Path(os.environ.get(OUTPUT_ENV, "results"))

    def n_steps(self, L: int | None = None) -> int:
        t = self.data["time"]
        if "N" in t:
            return int(t["N"])
        return int(t["Nt_hat"]) * 10 * int(t["s"])

    def t_end(self) -> float:
        t = self.data["time"]
        if "t_end" in t:
            return float(t["t_end"])
        L = self.data["sparse_grid"]["L"]
        return float(t["t_start"]) + self.n_steps() * float(t["dt_level_factor"]) * 4.0 ** (-L)


def parse_value(text: str):
    """Parse an override value with TOML syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return validate(data, str(path))


def _require(cond, field, msg):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _int(data, section, key, minimum=None):
    v = data[section].get(key)
    field = f"{section}.{key}"
    _require(isinstance(v, int) and not isinstance(v, bool), field, f"must be an integer, got {v!r}")
    if minimum is not None:
        _require(v >= minimum, field, f"must be >= {minimum}, got {v}")
    return v


def _number(data, section, key, positive=False, nonneg=False):
    v = data[section].get(key)
    field = f"{section}.{key}"
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), field, f"must be a number, got {v!r}")
    if positive:
        _require(v > 0, field, f"must be > 0, got {v}")
    if nonneg:
        _require(v >= 0, field, f"must be >= 0, got {v}")
    return float(v)


def validate(raw: dict, source: str | None = None) -> RunConfig:
    """Fill defaults and check every cross-field constraint before any work starts."""
    data = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        _require(section in DEFAULTS or section == "ssa", section, "unknown config section")
        _require(isinstance(values, dict), section, "must be a table")
        data.setdefault(section, {}).update(values)

    prob = data["problem"]
    kind = prob.get("kind")
    _require(kind in PROBLEMS, "problem.kind", f"must be one of {PROBLEMS}, got {kind!r}")
    dims = {"oscillator": 2, "linear4d": 4, "toggle2d": 2, "toggle3d": 3}
    if kind in dims:
        prob.setdefault("d", dims[kind])
        _require(prob["d"] == dims[kind], "problem.d", f"{kind} is {dims[kind]}-dimensional")
    if kind == "linear_sde":
        for key in ("theta", "sigma", "D", "M", "C", "lower", "upper"):
            _require(key in prob, f"problem.{key}", "required for a linear_sde problem")
        prob.setdefault("d", len(prob["M"]))
    d = _int(data, "problem", "d", 1)
    if kind == "heat":
        _require(d <= 6, "problem.d", f"heat problem supports d <= 6, got {d}")

    L = _int(data, "sparse_grid", "L", 1)
    L0 = _int(data, "sparse_grid", "L0", 1)
    _require(L0 <= L, "sparse_grid.L0", f"L0 must not exceed sparse_grid.L (L0={L0}, L={L})")
    _require(L + d - 1 >= d * L0, "sparse_grid.L0",
             f"no subproblem has all levels >= L0={L0} at L={L}, d={d} (need L + d - 1 >= d*L0)")

    t = data["time"]
    _number(data, "time", "t_start", nonneg=True)
    s = _int(data, "time", "s", 1)
    _require(("N" in t) != ("Nt_hat" in t), "time.N", "give exactly one of time.N and time.Nt_hat")
    N = _int(data, "time", "N", 1) if "N" in t else 10 * s * _int(data, "time", "Nt_hat", 1)
    _require(("t_end" in t) != ("dt_level_factor" in t), "time.t_end",
             "give exactly one of time.t_end and time.dt_level_factor")
    if "t_end" in t:
        _require(_number(data, "time", "t_end") > t["t_start"], "time.t_end", "must exceed time.t_start")
    else:
        _number(data, "time", "dt_level_factor", positive=True)

    c = _int(data, "mgrit", "c", 2)
    _int(data, "mgrit", "n_relax", 0)
    _int(data, "mgrit", "maxit", 1)
    _number(data, "mgrit", "tol", nonneg=True)
    _require(data["mgrit"]["stopping"] in ("local", "global"), "mgrit.stopping", "must be 'local' or 'global'")
    _require(N % s == 0, "time.s", f"N={N} must be divisible by s={s}")
    _require((N // s) % c == 0, "mgrit.c", f"steps per recombination window N/s={N // s} must be divisible by c={c}")

    sp_ = data["spatial"]
    _require(sp_["solver"] in ("direct", "dd"), "spatial.solver", "must be 'direct' or 'dd'")
    S = _int(data, "spatial", "S", 0)
    _number(data, "spatial", "gamma", nonneg=True)
    _number(data, "spatial", "tol", positive=True)
    _int(data, "spatial", "maxit", 1)
    if "q" in sp_:
        _int(data, "spatial", "q", 1)
    if "variant" in sp_:
        _require(sp_["variant"] in VARIANTS, "spatial.variant", f"must be one of {VARIANTS}")

    run = data["run"]
    _require(run["algorithm"] in ALGORITHMS, "run.algorithm", f"must be one of {ALGORITHMS}, got {run['algorithm']!r}")
    _int(data, "run", "parallel_degree", 1)
    _int(data, "run", "seed", 0)
    _int(data, "run", "error_samples", 0)
    Pt = run["Pt"]
    _require(isinstance(Pt, int) and Pt >= 1, "run.Pt", f"must be a positive integer, got {Pt!r}")
    if "probe" in run:
        _require(isinstance(run["probe"], list) and len(run["probe"]) == d, "run.probe", f"must be a list of {d} numbers")
    if "full_grid_level" in run:
        fl = run["full_grid_level"]
        _require(isinstance(fl, list) and len(fl) == d and all(isinstance(v, int) and v >= 1 for v in fl),
                 "run.full_grid_level", f"must be a list of {d} positive integers")
    if "ssa" in data:
        _int(data, "ssa", "trajectories", 1)
        data["ssa"].setdefault("seed", run["seed"])
    return RunConfig(data, source)
