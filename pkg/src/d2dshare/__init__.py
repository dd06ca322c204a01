"""Delay-optimal D2D data sharing and radio allocation for distributed learning at the wireless edge."""

from .convex import SolverOptions, SolverReport, solve_inner
from .delay import DelayBreakdown, SharingPlan, baseline_T1, total_delay
from .optimizer import OptimizationResult, SearchOptions, solve_fixed, solve_p1, solve_p2, verify_remarks
from .scenario import Scenario, build_paper_scenario, build_random_scenario, load_scenario, save_scenario

__version__ = "0.1.0"

__all__ = [
    "DelayBreakdown",
    "OptimizationResult",
    "Scenario",
    "SearchOptions",
    "SharingPlan",
    "SolverOptions",
    "SolverReport",
    "baseline_T1",
    "build_paper_scenario",
    "build_random_scenario",
    "load_scenario",
    "save_scenario",
    "solve_fixed",
    "solve_inner",
    "solve_p1",
    "solve_p2",
    "total_delay",
    "verify_remarks",
]
