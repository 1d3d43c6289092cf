"""Command line entry point: ``ctmgrit {run,study,probe,validate-config}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .config import ConfigError, load, parse_value
from .dd import SingularFactorization, SpatialSolverError
from .mgrit import MgritDivergence

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("ctmgrit")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{item}: overrides must look like section.key=value")
        out[key.strip()] = parse_value(value.strip())
    return out


def _config(args):
    cfg = load(args.config)
    over = _overrides(args.set)
    if getattr(args, "parallel", None):
        over["run.parallel_degree"] = args.parallel
    return cfg.with_overrides(over) if over else cfg


def cmd_validate(args) -> int:
    cfg = _config(args)
    exp = experiments.prepare(cfg)
    print(f"{args.config}: ok ({cfg['problem']['kind']}, {cfg.algorithm}, "
          f"{len(exp.scheme)} subproblems, N={exp.plan.partitions[0].N}, s={exp.plan.schedule.s}, "
          f"Px={list(exp.plan.Px)})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    exp = experiments.run_config(cfg)
    paths = experiments.write_outputs(exp, cfg.output_dir(args.output))
    s = exp.summary
    for oracle, errs in s["errors"].items():
        for name, value in errs.items():
            print(f"{oracle}.{name} = {value:.6e}")
    if s["mass"]["relative_change"] is not None:
        print(f"relative mass change = {s['mass']['relative_change']:.3e}")
    print(f"wrote {', '.join(str(p) for p in paths)}")
    if not s["converged"]:
        print(f"error: {s['failure']}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _config(args)
    rows = experiments.convergence_study(cfg, args.levels)
    out = cfg.output_dir(args.output)
    header = ("L", "oracle", "error", "nodes", "converged", "observed_order", "order_without_log_factor")
    experiments.atomic_write(out / "study.csv", experiments.to_csv(header, [[r[h] for h in header] for r in rows]))
    for r in rows:
        print(f"L={r['L']:3d}  error={r['error']:.4e}  nodes={r['nodes']}")
    print(f"observed order = {rows[0]['observed_order']:.3f} "
          f"(with L^(d-1) factor removed: {rows[0]['order_without_log_factor']:.3f})")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_SOLVER


def cmd_probe(args) -> int:
    cfg = _config(args)
    point = [float(v) for v in args.point.split(",")]
    if len(point) != cfg["problem"]["d"]:
        raise ConfigError(f"--point: expected {cfg['problem']['d']} coordinates, got {len(point)}")
    exp = experiments.run_config(cfg, probe_point=point)
    out = cfg.output_dir(args.output)
    experiments.atomic_write(out / "probe.csv", experiments.to_csv(experiments.PROBE_COLUMNS, exp.probe_rows))
    errs = [r[3] for r in exp.probe_rows if r[3] is not None]
    if errs:
        print(f"max probe error = {max(errs):.6e} over {len(errs)} times")
    print(f"wrote {out / 'probe.csv'}")
    return EXIT_OK if exp.summary["converged"] else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmgrit", description="Combination technique with parallel-in-time MGRIT.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, output=True):
        sp.add_argument("config", help="TOML run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        if output:
            sp.add_argument("-o", "--output", help="output directory (overrides run.output_dir and $CTMGRIT_OUTPUT_DIR)")
            sp.add_argument("-j", "--parallel", type=int, help="parallel degree (thread pool size)")

    sp = sub.add_parser("run", help="run one configured experiment")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("study", help="convergence study over sparse-grid levels")
    common(sp)
    sp.add_argument("--levels", type=int, nargs="+", required=True)
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("probe", help="time series of the combined solution at one point")
    common(sp)
    sp.add_argument("--point", required=True, help="comma-separated coordinates")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("validate-config", help="check a config without running it")
    common(sp, output=False)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpatialSolverError, SingularFactorization, MgritDivergence) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        # plan-level inconsistencies (e.g. divisibility) surface as invalid configuration
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
