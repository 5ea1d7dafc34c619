"""Command-line interface: ``gimkit contour | marginal | simulate``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Every output file embeds the run configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import engine, lab
from .errors import ConvergenceError, DomainError, SingularityError, SolverQualityError
from .problems import (DEFAULT_THRESHOLD, DTR_FEATURES, DTRProblem, QuantileProblem,
                       QuantileRegressionProblem, SchemaError, SpatialMedianProblem, read_csv,
                       dtr_feature_maps)

EXIT_USAGE = 2
EXIT_NUMERIC = 3
PROBLEM_NAMES = ("quantile", "spatial-median", "quantile-regression", "dtr")


class UsageError(Exception):
    pass


def parse_axis(text: str) -> np.ndarray:
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise UsageError(f"bad grid axis {text!r}; expected lo:hi:steps") from None
    if steps < 2 or not hi > lo:
        raise UsageError(f"grid axis {text!r} needs hi > lo and steps >= 2")
    return np.linspace(lo, hi, steps)


def parse_grid(text):
    return None if text is None else tuple(parse_axis(a) for a in text.split(","))


def parse_taus(text) -> list:
    try:
        taus = [float(t) for t in str(text).split(",")]
    except ValueError:
        raise UsageError(f"bad tau list {text!r}") from None
    for t in taus:
        if not 0.0 < t < 1.0:
            raise UsageError(f"tau must lie in (0, 1), got {t}")
    return taus


def default_seed() -> int:
    raw = os.environ.get("GIMKIT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GIMKIT_SEED must be an integer, got {raw!r}") from None


def make_problem(name: str, tau: float, data):
    if name == "quantile":
        if data.width != 1:
            raise SchemaError(f"quantile problem needs one column, got {data.width}", line=1)
        return QuantileProblem(tau)
    if name == "spatial-median":
        return SpatialMedianProblem(data.width)
    if name == "quantile-regression":
        return QuantileRegressionProblem(tau, p=data.width - 1)
    if name == "dtr":
        return DTRProblem()
    raise UsageError(f"unknown problem {name!r}")


def _write(path: Path, text: str):
    path.write_text(text if text.endswith("\n") else text + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _config(args, **extra) -> dict:
    keys = ("command", "problem", "tau", "B", "seed", "grid", "alpha", "threshold", "input",
            "experiment", "generator", "M", "n", "feature", "phi_grid")
    cfg = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    cfg.update(extra)
    return cfg


# ---------------------------------------------------------------------------
# Commands

def cmd_contour(args) -> int:
    data = read_csv(args.input)
    problem = make_problem(args.problem, args.tau, data)
    problem.validate(data)
    axes = parse_grid(args.grid)
    dist = engine.build_distribution(problem, data, args.B, args.seed, threads=args.threads)
    if axes is None:
        if problem.dim > 2:
            raise UsageError(f"problem {args.problem!r} has dimension {problem.dim}; pass --grid")
        axes = engine.default_axes(dist)
        grid_desc = f"default: theta_hat +- {engine.GRID_WIDTH} se, {engine.GRID_STEPS} points per axis"
    else:
        if len(axes) != problem.dim:
            raise UsageError(f"--grid has {len(axes)} axes, problem needs {problem.dim}")
        grid_desc = args.grid
    config = _config(args, grid=grid_desc, problem_spec=problem.describe())
    table = engine.contour_grid(dist, problem, data, axes=axes, config=config, threads=args.threads)
    region = engine.plausibility_region(table, args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"theta_{j + 1}" for j in range(problem.dim)]
    table.to_csv(out / "contour.csv", names)
    _write(out / "region.json", region.to_json())
    summary = {"config": config, "theta_hat": dist.theta_hat.tolist(), "B": dist.B,
               "seed": dist.seed, "flags": dist.flags, "cov": dist.cov.tolist(),
               "contour_max": float(table.values.max()),
               "stats_quantiles": np.quantile(dist.stats, [0.5, 0.9, 0.95, 0.99]).tolist()}
    if problem.dim == 2:
        summary["region_area"] = region.area
        summary["ellipse_area"] = float(math.pi * stats.chi2.ppf(1 - args.alpha, 2)
                                        * math.sqrt(max(np.linalg.det(dist.cov), 0.0)))
    _write(out / "summary.json", _dump(summary))
    _write(out / "distribution.json", dist.to_json())
    return 0


def cmd_marginal(args) -> int:
    data = read_csv(args.input)
    problem = DTRProblem()
    problem.validate(data)
    features = DTR_FEATURES if args.feature == "all" else tuple(args.feature.split(","))
    for f in features:
        if f not in DTR_FEATURES:
            raise UsageError(f"unknown feature {f!r}; choose from {', '.join(DTR_FEATURES)}")
    dist = engine.build_distribution(problem, data, args.B, args.seed, threads=args.threads)
    maps = dtr_feature_maps(data, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"config": _config(args), "theta_hat": dist.theta_hat.tolist(), "flags": dist.flags,
               "features": {}}
    for f in features:
        if args.phi_grid is not None:
            grid = parse_axis(args.phi_grid) if ":" in args.phi_grid else np.array(
                [float(v) for v in args.phi_grid.split(";")])
        else:
            grid = lab.feature_grid(dist, maps[f], include=[0.0])
        config = _config(args, feature=f)
        table = engine.marginal_contour(dist, problem, data, maps[f], grid,
                                        rng=np.random.default_rng(args.seed), config=config)
        table.to_csv(out / f"marginal_{f}.csv", ["phi"])
        missing = int(np.isnan(table.values).sum())
        summary["features"][f] = {"estimate": maps[f].phi(dist.theta_hat),
                                  "peak": lab.marginal_peak(table), "missing": missing}
    _write(out / "summary.json", _dump(summary))
    return 0


def cmd_simulate(args) -> int:
    out = Path(args.out)
    exp = args.experiment
    if args.M < 1 or args.n < 2:
        raise UsageError("--M must be >= 1 and --n >= 2")
    reports = []
    if exp == "dtr":
        report, tables = lab.dtr_experiment(args.n, args.B, args.M, args.seed, args.threshold,
                                            threads=args.threads)
        report.config["command"] = "simulate"
        out.mkdir(parents=True, exist_ok=True)
        for name, t in tables.items():
            t.to_csv(out / f"marginal_{name}.csv", ["phi"])
        reports = [report]
    else:
        gen_name = args.generator or ("cauchy" if exp == "coverage" else "gamma")
        for tau in parse_taus(args.tau):
            params = {} if gen_name in ("bvn", "dtr") else {"tau": tau}
            gen = lab.make_generator(gen_name, **params)
            if exp == "coverage":
                r = lab.coverage_experiment(gen, args.n, args.B, args.M, args.alpha, seed=args.seed,
                                            threads=args.threads)
            else:
                r = lab.uniformity_experiment(gen, args.n, args.B, args.M, args.seed, args.threads)
            r.config["command"] = "simulate"
            reports.append(r)
            if gen_name in ("bvn", "dtr"):
                break
        out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        suffix = f"_tau{r.config['tau']}" if "tau" in r.config else ""
        r.to_json(out / f"report{suffix}.json")
        r.ecdf_csv(out / f"ecdf{suffix}.csv")
    md = "\n".join(r.to_markdown() for r in reports)
    if exp == "coverage" and len(reports) > 1:
        md += "\n" + lab.coverage_table(reports) + "\n"
    _write(out / "report.md", md)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gimkit", description="Bootstrap generalized inferential models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--B", type=int, default=500, help="bootstrap replicates (default 500)")
        p.add_argument("--seed", type=int, default=None, help="master seed (default $GIMKIT_SEED or 0)")
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                       help="cholesterol threshold of the covariate-dependent regime")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("contour", help="contour, plausibility region and estimator summary")
    p.add_argument("--problem", choices=PROBLEM_NAMES, required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--grid", help="per-axis lo:hi:steps, axes separated by commas")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=cmd_contour)

    p = sub.add_parser("marginal", help="marginal contours of treatment-regime features")
    p.add_argument("--feature", default="all", help="feature name, comma list or 'all'")
    p.add_argument("--phi-grid", dest="phi_grid", help="lo:hi:steps or ';'-separated values")
    p.add_argument("--input", required=True)
    common(p)
    p.set_defaults(func=cmd_marginal)

    p = sub.add_parser("simulate", help="repeated-sampling experiments")
    p.add_argument("--experiment", choices=("uniformity", "coverage", "dtr"), required=True)
    p.add_argument("--generator", choices=sorted(lab.GENERATORS))
    p.add_argument("--tau", default="0.5", help="tau or comma list of taus")
    p.add_argument("--n", type=int, default=None, help="sample size (default 1000 for dtr, else 100)")
    p.add_argument("--M", type=int, default=1000)
    common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.seed is None:
            args.seed = default_seed()
        if getattr(args, "B", 1) < 1:
            raise UsageError("--B must be at least 1")
        if not 0.0 <= args.alpha <= 1.0:
            raise UsageError("--alpha must lie in [0, 1]")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if args.command == "simulate" and args.n is None:
            args.n = 1000 if args.experiment == "dtr" else 100
        return args.func(args)
    except (UsageError, DomainError, OSError) as exc:
        line = getattr(exc, "line", None)
        where = f"line {line}: " if line is not None else ""
        print(f"gimkit: error: {where}{exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularityError, SolverQualityError, ConvergenceError) as exc:
        print(f"gimkit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
