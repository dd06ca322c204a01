"""Command-line entry point: ``d2dshare {scenario,optimize,sweep,simulate}``.

Exit status: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .convex import SolverError
from .delay import SharingPlan
from .optimizer import SCHEMES, SearchOptions, solve_scheme, write_tau1_profile
from .scenario import (
    Scenario,
    ScenarioError,
    build_paper_scenario,
    build_random_scenario,
    dbm_to_watts,
    load_scenario,
    save_scenario,
    scenario_to_dict,
)
from .training import POLICIES, TrainingConfig, make_synthetic_task, partition_pool, run_training

log = logging.getLogger("d2dshare")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

SCHEME_ALIASES = {
    "p1": "proposed_P1",
    "proposed": "proposed_P1",
    "proposed_P1": "proposed_P1",
    "p2": "adaptive_P2",
    "adaptive": "adaptive_P2",
    "adaptive_P2": "adaptive_P2",
    "fixed": "fixed_T1",
    "fixed_T1": "fixed_T1",
}
SWEEP_VARIABLES = ("M", "B", "K", "tx_power")


class UsageError(Exception):
    pass


def _scheme(name: str) -> str:
    try:
        return SCHEME_ALIASES[name]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown scheme {name!r}") from None


def _search_options(args) -> SearchOptions:
    opt = SearchOptions(jobs=args.jobs)
    if args.tol is not None:
        opt.rel_tol = args.tol
    if getattr(args, "grid", None):
        opt.grid_points = args.grid
    return opt


def _load(args) -> Scenario:
    if args.scenario is None:
        raise UsageError("a scenario file is required (-s/--scenario)")
    if not Path(args.scenario).is_file():
        raise UsageError(f"scenario file not found: {args.scenario}")
    return load_scenario(args.scenario)


def _dump_json(doc, path):
    text = json.dumps(doc, indent=2, allow_nan=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------


def cmd_scenario(args) -> int:
    if args.paper == args.random:
        raise UsageError("choose exactly one of --paper or --random")
    if args.random:
        scenario = build_random_scenario(args.seed, 6 if args.k is None else args.k)
    else:
        if args.k is not None and args.k != 6:
            raise UsageError("--k applies to --random only (the --paper setup has K=6)")
        scenario = build_paper_scenario(seed=args.seed, disc_radius=args.radius)
    if args.m is not None:
        scenario = scenario.with_params(global_iters_M=args.m)
    if args.out in (None, "-"):
        _dump_json(scenario_to_dict(scenario), None)
    else:
        save_scenario(scenario, args.out)
    return EXIT_OK


def cmd_optimize(args) -> int:
    scenario = _load(args)
    if args.m is not None:
        scenario = scenario.with_params(global_iters_M=args.m)
    try:
        result = solve_scheme(args.scheme, scenario, _search_options(args))
    except SolverError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    print(repr(result.objective))
    if args.out:
        _dump_json(result.to_dict(), args.out)
    if args.profile:
        write_tau1_profile(result, args.profile)
    return EXIT_OK if result.report.converged else EXIT_NUMERIC


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    schemes: tuple
    seed: int = 0

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise UsageError(f"unknown sweep variable {self.variable!r}; expected one of {SWEEP_VARIABLES}")
        if not self.values:
            raise UsageError("sweep needs at least one value")
        for v in self.values:
            if self.variable in ("M", "K") and (int(v) != v or v < (1 if self.variable == "M" else 2)):
                raise UsageError(f"invalid {self.variable} value {v}")
            if self.variable == "B" and not v > 0:
                raise UsageError(f"invalid bandwidth {v}")
        if not self.schemes:
            raise UsageError("sweep needs at least one scheme")


def sweep_scenario(base: Scenario, variable: str, value: float, seed: int) -> Scenario:
    if variable == "M":
        return base.with_params(global_iters_M=int(value))
    if variable == "B":
        return base.with_params(bandwidth_B=float(value))
    if variable == "K":
        return build_random_scenario(seed, int(value), params=base.params)
    if variable == "tx_power":
        return base.with_devices(tx_power_P=dbm_to_watts(float(value)))
    raise UsageError(f"unknown sweep variable {variable!r}")


def _sweep_row(task):
    scheme, spec_variable, value, base, seed, options = task
    scenario = sweep_scenario(base, spec_variable, value, seed)
    try:
        result = solve_scheme(scheme, scenario, options)
        return (scheme, spec_variable, value, result.objective, result.plan.tau1, result.report.converged)
    except SolverError:
        return (scheme, spec_variable, value, float("nan"), float("nan"), False)


def run_sweep(base: Scenario, spec: SweepSpec, options: SearchOptions, jobs: int = 1) -> list[tuple]:
    tasks = [(s, spec.variable, v, base, spec.seed, options) for s in spec.schemes for v in spec.values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_row, tasks))
    else:
        rows = [_sweep_row(t) for t in tasks]
    return sorted(rows, key=lambda r: (SCHEMES.index(r[0]), r[2]))


def _format_value(variable, value):
    return str(int(value)) if variable in ("M", "K") else repr(float(value))


def cmd_sweep(args) -> int:
    values = tuple(float(v) for v in args.values.split(",") if v.strip()) if args.values else ()
    schemes = tuple(dict.fromkeys(_scheme(s.strip()) for s in args.schemes.split(",") if s.strip()))
    spec = SweepSpec(args.variable, values, schemes, args.seed)
    base = build_paper_scenario() if args.scenario is None else _load(args)
    inner = replace(_search_options(args), jobs=1)
    rows = run_sweep(base, spec, inner, jobs=args.jobs)
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="", encoding="utf-8")
    try:
        writer = csv.writer(out)
        writer.writerow(["scheme", "variable", "value", "objective_seconds", "tau1", "converged"])
        for scheme, variable, value, obj, tau1, ok in rows:
            writer.writerow([scheme, variable, _format_value(variable, value), repr(float(obj)), repr(float(tau1)),
                             str(bool(ok)).lower()])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK if any(r[5] for r in rows) else EXIT_NUMERIC


def cmd_simulate(args) -> int:
    scenario = _load(args)
    if args.m is not None:
        scenario = scenario.with_params(global_iters_M=max(args.m, 1))
    if args.plan:
        plan = SharingPlan.from_dict(json.loads(Path(args.plan).read_text(encoding="utf-8"))["plan"])
    else:
        try:
            plan = solve_scheme(args.scheme, scenario, _search_options(args)).plan
        except SolverError as exc:
            log.error("%s", exc)
            return EXIT_NUMERIC
    hists = np.array([d.label_histogram for d in scenario.devices])
    num_classes = hists.shape[1]
    per_class = int(hists.sum(axis=0).max())
    pool, test = make_synthetic_task(num_classes, args.features, per_class * num_classes, args.separation, args.seed)
    datasets = partition_pool(pool, hists, args.seed)
    cfg = TrainingConfig(global_iters=args.m, learning_rate=args.eta, policy=args.policy, seed=args.seed)
    stem = Path(args.out or "trace")
    traces = {"shared": run_training(scenario, datasets, plan, cfg, test)}
    if args.compare:
        traces["noshare"] = run_training(scenario, datasets, None, cfg, test)
    for name, trace in traces.items():
        path = stem.with_name(f"{stem.name}_{name}.csv") if args.compare else stem.with_suffix(".csv")
        trace.write_csv(path)
        print(f"{name}: final accuracy {trace.final_accuracy:.4f}, elapsed {trace.elapsed_seconds[-1]:.6g} s -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-s", "--scenario", help="scenario JSON file")
    common.add_argument("-o", "--out", help="output path")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--tol", type=float, default=None, help="relative tau1 search tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="d2dshare", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", parents=[common], help="write a scenario file")
    p.add_argument("--paper", action="store_true", help="six-device evaluation setup")
    p.add_argument("--random", action="store_true", help="random heterogeneous devices")
    p.add_argument("--k", type=int, default=None, help="number of devices (random only)")
    p.add_argument("--radius", type=float, default=100.0, help="device disc radius in meters")
    p.add_argument("--m", type=int, default=None, help="global iterations")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("optimize", parents=[common], help="solve one allocation scheme")
    p.add_argument("--scheme", type=_scheme, default="proposed_P1", help="p1 | p2 | fixed")
    p.add_argument("--m", type=int, default=None, help="override global iterations")
    p.add_argument("--grid", type=int, default=None, help="tau1 grid points")
    p.add_argument("--profile", help="write the tau1 profile CSV here")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", parents=[common], help="objective of each scheme over a parameter")
    p.add_argument("--variable", required=True, choices=SWEEP_VARIABLES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--schemes", default="p1,p2,fixed")
    p.add_argument("--grid", type=int, default=None, help="tau1 grid points")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", parents=[common], help="train on synthetic non-IID data")
    p.add_argument("--scheme", type=_scheme, default="proposed_P1")
    p.add_argument("--plan", help="use the plan from an optimize result JSON")
    p.add_argument("--compare", action="store_true", help="also train without sharing")
    p.add_argument("--m", type=int, default=None, help="global iterations")
    p.add_argument("--eta", type=float, default=None, help="learning rate (default: scenario)")
    p.add_argument("--policy", choices=POLICIES, default="proportional")
    p.add_argument("--features", type=int, default=20)
    p.add_argument("--separation", type=float, default=5.0, help="class-mean distance in noise std units")
    p.add_argument("--grid", type=int, default=None, help="tau1 grid points")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, ScenarioError) as exc:
        print(f"d2dshare {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"d2dshare {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
