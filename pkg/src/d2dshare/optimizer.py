"""Delay-minimizing allocation schemes.

* ``proposed_P1``: joint D2D sharing + adaptive allocation, solved by a 1D
  search over the sharing-phase budget tau1 with a convex inner solve.
* ``adaptive_P2``: no sharing, min-max upload bandwidth split by bisection.
* ``fixed_T1``: no sharing, equal upload split.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convex import (
    SolverError,
    SolverOptions,
    SolverReport,
    min_bandwidth_for_rate,
    solve_inner,
)
from .delay import (
    DelayBreakdown,
    SharingPlan,
    baseline_T1,
    broadcast_delay,
    compute_delays,
    post_share_counts,
    total_delay,
    upload_delays,
)
from .scenario import Scenario

SCHEMES = ("proposed_P1", "adaptive_P2", "fixed_T1")

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class InfeasibleError(SolverError):
    pass


@dataclass
class SearchOptions:
    grid_points: int = 64
    rel_tol: float = 1e-4
    jobs: int = 1
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class OptimizationResult:
    scheme: str
    plan: SharingPlan
    delay: DelayBreakdown
    report: SolverReport
    tau1_profile: list = field(default_factory=list)  # (tau1, objective, converged)

    @property
    def objective(self) -> float:
        return self.delay.total

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "objective": self.objective,
            "plan": self.plan.to_dict(),
            "delay": self.delay.to_dict(),
            "report": self.report.to_dict(),
            "tau1_profile": [list(row) for row in self.tau1_profile],
        }


def write_tau1_profile(result: OptimizationResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau1", "objective", "converged"])
        for tau1, obj, ok in result.tau1_profile:
            writer.writerow([repr(float(tau1)), repr(float(obj)), str(bool(ok)).lower()])


def golden_section(func, a: float, b: float, tol: float):
    """Shrink ``[a, b]`` around a minimum of ``func`` until it is at most ``tol`` wide.

    Returns the list of ``(x, func(x))`` evaluations made.
    """
    evals = []

    def f(x):
        y = func(x)
        evals.append((x, y))
        return y

    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    return evals


def _inner_task(args):
    tau1, scenario, solver = args
    return solve_inner(tau1, scenario, solver)


def solve_p1(scenario: Scenario, options: SearchOptions | None = None) -> OptimizationResult:
    opt = options or SearchOptions()
    M = scenario.params.global_iters_M
    t_bc = broadcast_delay(scenario)
    T1 = baseline_T1(scenario)
    solutions = {}
    profile = []

    def record(tau1, sol):
        solutions[tau1] = sol
        g = tau1 + M * (t_bc + sol.tau2)
        profile.append((tau1, g, sol.report.converged))
        return g if sol.report.converged else math.inf

    grid = np.linspace(0.0, T1, max(opt.grid_points, 2))
    if opt.jobs > 1:
        with ProcessPoolExecutor(max_workers=opt.jobs) as pool:
            sols = list(pool.map(_inner_task, [(float(t), scenario, opt.solver) for t in grid]))
    else:
        sols = [solve_inner(float(t), scenario, opt.solver) for t in grid]
    values = np.array([record(float(t), s) for t, s in zip(grid, sols)])
    if not np.isfinite(values).any():
        report = SolverReport(False, 0, math.nan, math.nan, "inner solve failed at every tau1 sample",
                              [float(t) for t in grid])
        raise SolverError("P1 search failed: no tau1 sample converged", report)

    k = int(np.argmin(values))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]

    def g(tau1):
        tau1 = float(tau1)
        if tau1 in solutions:
            sol = solutions[tau1]
            return tau1 + M * (t_bc + sol.tau2) if sol.report.converged else math.inf
        return record(tau1, solve_inner(tau1, scenario, opt.solver))

    golden_section(g, lo, hi, opt.rel_tol * T1)

    valid = [s for s in solutions.values() if s.report.converged]
    best = min(valid, key=lambda s: (s.plan.objective, s.tau1))
    invalid = sorted(t for t, s in solutions.items() if not s.report.converged)
    iterations = sum(s.report.iterations for s in solutions.values())
    report = SolverReport(
        converged=True,
        iterations=iterations,
        final_duality_measure=best.report.final_duality_measure,
        max_constraint_violation=best.report.max_constraint_violation,
        message=f"best tau1 budget={best.tau1:.6g} s over {len(solutions)} samples",
        invalid_samples=invalid,
    )
    plan = best.plan
    delay = total_delay(plan, scenario)
    plan.objective = delay.total
    profile.sort(key=lambda row: row[0])
    return OptimizationResult("proposed_P1", plan, delay, report, profile)


def _p2_bandwidths(tau, comp, scenario: Scenario):
    """Per-device minimum upload bandwidth to finish a round within ``tau``; ``None`` if impossible."""
    prm = scenario.params
    out = np.empty(scenario.K)
    for i in range(scenario.K):
        slack = tau - comp[i]
        if slack <= 0:
            return None, i
        b = min_bandwidth_for_rate(prm.model_bits_Q / slack, scenario.P[i], scenario.g[i], prm.noise_psd_n0)
        if b is None:
            return None, i
        out[i] = b
    return out, None


def solve_p2(scenario: Scenario, rel_tol: float = 1e-12) -> OptimizationResult:
    """Min-max upload bandwidth split without sharing."""
    prm = scenario.params
    B, K = prm.bandwidth_B, scenario.K
    comp = compute_delays(scenario.samples, scenario)
    equal = np.full(K, B / K)
    lo = float(np.max(comp))
    hi = float(np.max(comp + upload_delays(equal, scenario)))

    def feasible(tau):
        bw, _ = _p2_bandwidths(tau, comp, scenario)
        return bw is not None and bw.sum() <= B

    iterations = 0
    if not math.isfinite(hi):
        raise InfeasibleError("equal bandwidth split gives an infinite round time")
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
        iterations += 1
    bw, bad = _p2_bandwidths(hi, comp, scenario)
    if bw is None or bw.sum() > B * (1 + 1e-12):
        if bad is not None and not math.isfinite(hi):
            raise InfeasibleError(f"device {bad} cannot meet any finite round time")
        bw = equal
    else:
        # Hand the leftover bandwidth out proportionally; it only shortens rounds.
        bw = bw * (B / bw.sum())
    plan = SharingPlan.no_sharing(scenario, bw)
    delay = total_delay(plan, scenario)
    per_dev = delay.compute + delay.upload
    plan.tau2 = float(np.max(per_dev))
    plan.objective = delay.total
    report = SolverReport(
        converged=True,
        iterations=iterations,
        final_duality_measure=(hi - lo) / hi,
        max_constraint_violation=plan.max_violation(scenario),
        message=f"tau*={plan.tau2:.9g} s",
    )
    return OptimizationResult("adaptive_P2", plan, delay, report)


def solve_fixed(scenario: Scenario) -> OptimizationResult:
    plan = SharingPlan.no_sharing(scenario)
    delay = total_delay(plan, scenario)
    plan.tau2 = float(np.max(delay.compute + delay.upload))
    plan.objective = delay.total
    report = SolverReport(True, 0, 0.0, plan.max_violation(scenario), "closed form")
    return OptimizationResult("fixed_T1", plan, delay, report)


def solve_scheme(scheme: str, scenario: Scenario, options: SearchOptions | None = None) -> OptimizationResult:
    if scheme in ("proposed_P1", "p1"):
        return solve_p1(scenario, options)
    if scheme in ("adaptive_P2", "p2"):
        return solve_p2(scenario)
    if scheme in ("fixed_T1", "fixed"):
        return solve_fixed(scenario)
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class RemarkCheck:
    unidirectional: bool
    bidirectional_slack: float  # largest min(d_ij, d_ji), in samples
    equalized: bool
    round_time_spread: float  # (max - min) of compute+upload, relative to tau2

    @property
    def passed(self) -> bool:
        return self.unidirectional and self.equalized


def verify_remarks(plan: SharingPlan, scenario: Scenario, tol: float = 1e-3, eps_d: float | None = None) -> RemarkCheck:
    """Check the optimality structure: one-way transfers and equal per-device round times."""
    if eps_d is None:
        eps_d = 1e-6 * float(scenario.samples.max())
    d = np.array(plan.d, dtype=float)
    np.fill_diagonal(d, 0.0)
    both = np.minimum(d, d.T)
    slack = float(both.max()) if both.size else 0.0
    per_dev = compute_delays(post_share_counts(d, scenario.samples), scenario) + upload_delays(plan.b_upload, scenario)
    tau2 = float(np.max(per_dev))
    spread = float(np.max(per_dev) - np.min(per_dev)) / tau2
    return RemarkCheck(slack <= eps_d, slack, spread <= tol, spread)
