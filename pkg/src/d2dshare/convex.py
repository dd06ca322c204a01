"""Scalar root finding, rate inversion and the barrier solver for the inner problem.

The inner problem fixes the sharing-phase budget ``tau1`` and minimizes the
per-round compute+upload time ``tau2`` over transfers, D2D bandwidth/power
and upload bandwidth. With ``tau1`` fixed every constraint is convex, so a
log-barrier interior-point method solves it to a certified duality gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .delay import (
    LN2,
    SharingPlan,
    compute_delays,
    post_share_counts,
    rate_ceiling,
    shannon_rate,
    sharing_delay,
    total_delay,
    upload_delays,
)
from .scenario import Scenario


class BracketError(ValueError):
    """Target value is not bracketed by the search interval."""


class SolverError(RuntimeError):
    """Raised when a solve cannot produce a usable result."""

    def __init__(self, message: str, report: SolverReport | None = None):
        super().__init__(message)
        self.report = report


def bisect(func, target: float, lo: float, hi: float, tol: float) -> float:
    """Solve ``func(x) == target`` for monotone ``func`` on ``[lo, hi]``.

    Works for increasing and decreasing functions; the returned point is
    within ``tol`` of the crossing.
    """
    if not hi >= lo:
        raise BracketError(f"empty interval [{lo}, {hi}]")
    f_lo = func(lo) - target
    f_hi = func(hi) - target
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    if (f_lo > 0) == (f_hi > 0):
        raise BracketError(f"target {target} not bracketed on [{lo}, {hi}]")
    increasing = f_hi > 0
    n_iter = max(0, math.ceil(math.log2((hi - lo) / tol))) if hi > lo else 0
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        if (func(mid) - target > 0) == increasing:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def min_bandwidth_for_rate(required_rate: float, power: float, gain: float, n0: float, rel_tol: float = 1e-13):
    """Smallest bandwidth whose rate reaches ``required_rate``; ``None`` when unreachable.

    The rate is increasing and concave in bandwidth and saturates at
    ``gain*power/(n0*ln 2)``, so any rate at or above that ceiling is infeasible.
    """
    if required_rate <= 0:
        return 0.0
    if required_rate >= float(rate_ceiling(power, gain, n0)):
        return None
    # rate(b) >= b for b <= gain*power/n0, so this is a valid starting bracket.
    hi = max(required_rate, 1e-300)
    while shannon_rate(hi, power, gain, n0) < required_rate:
        hi *= 2.0
    lo = hi / 2.0 if hi > required_rate else 0.0
    while shannon_rate(lo, power, gain, n0) >= required_rate and lo > 0:
        lo /= 2.0
    b = bisect(lambda x: shannon_rate(x, power, gain, n0), required_rate, lo, hi, rel_tol * hi)
    # Return the upper end so the rate requirement is met, not just approached.
    while shannon_rate(b, power, gain, n0) < required_rate:
        b += rel_tol * hi
    return b


@dataclass
class SolverOptions:
    duality_tol: float = 1e-8
    feas_tol: float = 1e-6
    mu: float = 10.0
    alpha: float = 0.25
    beta: float = 0.5
    t0: float = 1.0
    newton_tol: float = 1e-10
    max_newton_per_stage: int = 200
    max_newton_total: int = 3000
    bandwidth_floor: float = 1e-9  # D2D bandwidth lower bound, as a fraction of B
    zero_share_rel: float = 1e-6  # sharing below this fraction of max|D_i| counts as zero


@dataclass
class SolverReport:
    converged: bool
    iterations: int
    final_duality_measure: float
    max_constraint_violation: float
    message: str = ""
    invalid_samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_duality_measure": self.final_duality_measure,
            "max_constraint_violation": self.max_constraint_violation,
            "message": self.message,
            "invalid_samples": list(self.invalid_samples),
        }


def _psi(b, p, c):
    """Scaled perspective rate ``b*log2(1 + c*p/b)`` with its first and second derivatives."""
    x = c * p / b
    l1p = np.log1p(x)
    inv = 1.0 / (1.0 + x)
    val = b * l1p / LN2
    d_b = (l1p - x * inv) / LN2
    d_p = c * inv / LN2
    common = inv * inv / (b * LN2)
    d_bb = -x * x * common
    d_bp = c * x * common
    d_pp = -c * c * common
    return val, d_b, d_p, d_bb, d_bp, d_pp


class InnerProblem:
    """Normalized barrier formulation of the fixed-``tau1`` subproblem.

    Variable vector: transfers d (one per active pair, scaled by max|D_i|),
    D2D bandwidth (scaled by B), D2D power (scaled by the sender's P_i),
    upload bandwidth (scaled by B), then tau2 (scaled by the equal-split
    per-round time).
    """

    def __init__(self, tau1: float, scenario: Scenario, options: SolverOptions | None = None):
        if tau1 < 0:
            raise ValueError(f"tau1 must be >= 0, got {tau1}")
        self.tau1 = float(tau1)
        self.scenario = scenario
        self.options = options or SolverOptions()
        prm = scenario.params
        K = scenario.K
        self.K = K
        self.B = prm.bandwidth_B
        self.d_scale = max(float(scenario.samples.max()), 1.0)
        self.t_scale = float(
            np.max(compute_delays(scenario.samples, scenario) + upload_delays(np.full(K, self.B / K), scenario))
        )
        # Pairs with something to send over a nonzero budget; others are fixed at zero.
        if self.tau1 > 0:
            self.pairs = [(i, j) for i in range(K) for j in range(K) if i != j and scenario.samples[i] > 0]
        else:
            self.pairs = []
        npairs = len(self.pairs)
        self.npairs = npairs
        self.senders = sorted({i for i, _ in self.pairs})
        self.i_d = np.arange(npairs)
        self.i_b = npairs + np.arange(npairs)
        self.i_p = 2 * npairs + np.arange(npairs)
        self.i_u = 3 * npairs + np.arange(K)
        self.i_tau = 3 * npairs + K
        n = self.i_tau + 1
        self.n = n

        send = np.array([i for i, _ in self.pairs], dtype=int)
        recv = np.array([j for _, j in self.pairs], dtype=int)
        self.send, self.recv = send, recv
        # 17c coefficient: tau1 * B / (a * d_scale); c = h*P_i/(n0*B)
        self.kappa = self.tau1 * self.B / (prm.sample_bits_a * self.d_scale)
        self.c_pair = scenario.h[send, recv] * scenario.P[send] / (prm.noise_psd_n0 * self.B) if npairs else np.zeros(0)
        self.e_up = scenario.g * scenario.P / (prm.noise_psd_n0 * self.B)
        self.q_up = prm.model_bits_Q / (self.B * self.t_scale)
        self.comp_per_sample = prm.local_iters_N * prm.flops_per_sample_L / (scenario.C * scenario.f * self.t_scale)

        rows, consts = [], []

        def row():
            r = np.zeros(n)
            rows.append(r)
            return r

        # 17c rows first (nonlinear part added at evaluation time).
        self.r_share = np.arange(npairs)
        for k in range(npairs):
            r = row()
            r[self.i_d[k]] = -1.0
            consts.append(0.0)
        # 17d rows: tau2 - compute_i(d) - upload_i(u_i) >= 0
        self.r_round = npairs + np.arange(K)
        for i in range(K):
            r = row()
            r[self.i_tau] = 1.0
            for k, (s, t) in enumerate(self.pairs):
                if s == i:
                    r[self.i_d[k]] += self.comp_per_sample[i] * self.d_scale
                if t == i:
                    r[self.i_d[k]] -= self.comp_per_sample[i] * self.d_scale
            consts.append(-self.comp_per_sample[i] * scenario.samples[i])
        # Upload bandwidth budget.
        r = row()
        r[self.i_u] = -1.0
        consts.append(1.0)
        if npairs:
            r = row()
            r[self.i_b] = -1.0
            consts.append(1.0)
            for i in self.senders:
                mask = send == i
                r = row()
                r[self.i_d[mask]] = -1.0
                consts.append(scenario.samples[i] / self.d_scale)
                r = row()
                r[self.i_p[mask]] = -1.0
                consts.append(1.0)
        # Bounds.
        for idx in self.i_d:
            row()[idx] = 1.0
            consts.append(0.0)
        for idx in self.i_b:
            row()[idx] = 1.0
            consts.append(-self.options.bandwidth_floor)
        for idx in self.i_p:
            row()[idx] = 1.0
            consts.append(0.0)
        for idx in self.i_u:
            row()[idx] = 1.0
            consts.append(0.0)
        row()[self.i_tau] = 1.0
        consts.append(0.0)

        self.A = np.array(rows)
        self.c0 = np.array(consts)
        self.m = len(rows)

    # -- evaluation -----------------------------------------------------

    def _upload_terms(self, u):
        val, d_u, _, d_uu, _, _ = _psi(u, 1.0, self.e_up)
        phi = self.q_up / val
        dphi = -self.q_up * d_u / val**2
        ddphi = self.q_up * (2.0 * d_u**2 / val**3 - d_uu / val**2)
        return phi, dphi, ddphi

    def slacks(self, x):
        """Constraint values (all must be > 0 in the interior); ``None`` outside the domain."""
        b = x[self.i_b]
        p = x[self.i_p]
        u = x[self.i_u]
        if np.any(u <= 0) or np.any(b <= 0) or np.any(p < 0):
            return None
        s = self.A @ x + self.c0
        if self.npairs:
            s[self.r_share] += self.kappa * _psi(b, p, self.c_pair)[0]
        s[self.r_round] -= self._upload_terms(u)[0]
        return s

    def barrier_value(self, x, t):
        s = self.slacks(x)
        if s is None or np.any(s <= 0):
            return math.inf
        return t * x[self.i_tau] - np.sum(np.log(s))

    def barrier_roundoff(self, x, t):
        """Absolute round-off scale of ``barrier_value`` at ``x``."""
        s = self.slacks(x)
        return 64.0 * np.finfo(float).eps * (abs(t * x[self.i_tau]) + np.sum(np.abs(np.log(s))))

    def newton_system(self, x, t):
        s = self.slacks(x)
        J = self.A.copy()
        b = x[self.i_b]
        p = x[self.i_p]
        if self.npairs:
            _, d_b, d_p, d_bb, d_bp, d_pp = _psi(b, p, self.c_pair)
            J[self.r_share, self.i_b] += self.kappa * d_b
            J[self.r_share, self.i_p] += self.kappa * d_p
        _, dphi, ddphi = self._upload_terms(x[self.i_u])
        J[self.r_round, self.i_u] -= dphi
        inv_s = 1.0 / s
        grad = -J.T @ inv_s
        grad[self.i_tau] += t
        H = (J.T * inv_s**2) @ J
        if self.npairs:
            w = self.kappa * inv_s[self.r_share]
            H[self.i_b, self.i_b] -= w * d_bb
            H[self.i_b, self.i_p] -= w * d_bp
            H[self.i_p, self.i_b] -= w * d_bp
            H[self.i_p, self.i_p] -= w * d_pp
        H[self.i_u, self.i_u] += inv_s[self.r_round] * ddphi
        return grad, H

    # -- start point and decoding -------------------------------------

    def strictly_feasible_start(self):
        K, npairs = self.K, self.npairs
        x = np.zeros(self.n)
        x[self.i_u] = 1.0 / (2 * K)
        if npairs:
            x[self.i_b] = 1.0 / (2 * npairs)
            n_out = np.bincount(self.send, minlength=K)
            x[self.i_p] = 1.0 / (2 * n_out[self.send])
            cap_link = self.kappa * _psi(x[self.i_b], x[self.i_p], self.c_pair)[0]
            cap_sender = self.scenario.samples[self.send] / self.d_scale / n_out[self.send]
            x[self.i_d] = 0.25 * np.minimum(cap_link, cap_sender)
        counts = post_share_counts(self._d_grid(x), self.scenario.samples)
        per_dev = self.comp_per_sample * counts + self._upload_terms(x[self.i_u])[0]
        x[self.i_tau] = 2.0 * float(np.max(per_dev))
        return x

    def _d_grid(self, x):
        d = np.zeros((self.K, self.K))
        if self.npairs:
            d[self.send, self.recv] = x[self.i_d] * self.d_scale
        return d

    def decode(self, x) -> SharingPlan:
        K = self.K
        d = self._d_grid(x)
        b = np.zeros((K, K))
        p = np.zeros((K, K))
        if self.npairs:
            b[self.send, self.recv] = x[self.i_b] * self.B
            p[self.send, self.recv] = x[self.i_p] * self.scenario.P[self.send]
        return SharingPlan(d, b, p, x[self.i_u] * self.B, tau1=self.tau1, tau2=x[self.i_tau] * self.t_scale)

    def relative_violation(self, plan: SharingPlan) -> float:
        """Largest relative violation over all constraints of the fixed-``tau1`` problem."""
        sc = self.scenario
        prm = sc.params
        worst = plan.max_violation(sc)
        off = ~np.eye(self.K, dtype=bool)
        moving = off & (plan.d > 0)
        if moving.any():
            cap = self.tau1 * shannon_rate(plan.b_d2d[moving], plan.p_d2d[moving], sc.h[moving], prm.noise_psd_n0)
            need = prm.sample_bits_a * plan.d[moving]
            worst = max(worst, float(np.max((need - cap) / (prm.sample_bits_a * self.d_scale))))
        per_dev = compute_delays(post_share_counts(plan.d, sc.samples), sc) + upload_delays(plan.b_upload, sc)
        worst = max(worst, float(np.max(per_dev - plan.tau2)) / self.t_scale)
        return max(worst, 0.0)


def cancel_circulations(d: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Remove directed cycles from a transfer grid without changing net flows.

    Only lowers entries, so every link and sender budget that held before
    still holds, and post-share counts are unchanged.
    """
    d = np.array(d, dtype=float)
    np.fill_diagonal(d, 0.0)
    d[d <= tol] = 0.0
    k = d.shape[0]
    while True:
        cycle = _find_cycle(d > 0, k)
        if cycle is None:
            return d
        edges = list(zip(cycle, cycle[1:] + cycle[:1]))
        amount = min(d[i, j] for i, j in edges)
        for i, j in edges:
            d[i, j] -= amount
        # The bottleneck edge must leave the support even under rounding.
        i, j = min(edges, key=lambda e: d[e])
        d[i, j] = 0.0
        d[d <= tol] = 0.0


def _find_cycle(adj: np.ndarray, k: int):
    state = [0] * k  # 0 unvisited, 1 on stack, 2 done
    stack_path: list[int] = []

    def visit(v):
        state[v] = 1
        stack_path.append(v)
        for w in np.flatnonzero(adj[v]):
            w = int(w)
            if state[w] == 1:
                return stack_path[stack_path.index(w):]
            if state[w] == 0:
                found = visit(w)
                if found is not None:
                    return found
        state[v] = 2
        stack_path.pop()
        return None

    for v in range(k):
        if state[v] == 0:
            found = visit(v)
            if found is not None:
                return list(found)
    return None


def _newton_direction(H, grad):
    scale = 1.0 / np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H * scale[:, None] * scale[None, :]
    try:
        step = np.linalg.solve(Hs, -grad * scale)
    except np.linalg.LinAlgError:
        step = np.linalg.lstsq(Hs, -grad * scale, rcond=None)[0]
    return step * scale


def barrier_solve(problem: InnerProblem, x0=None):
    """Minimize tau2 over the inner feasible set; returns ``(x, report)``."""
    opt = problem.options
    x = problem.strictly_feasible_start() if x0 is None else np.array(x0, dtype=float)
    s0 = problem.slacks(x)
    if s0 is None or np.any(s0 <= 0):
        report = SolverReport(False, 0, math.inf, math.inf, "no strictly feasible start")
        return x, report
    m = problem.m
    t = opt.t0
    total = 0
    message = "converged"
    converged = True
    while True:
        for _ in range(opt.max_newton_per_stage):
            grad, H = problem.newton_system(x, t)
            dx = _newton_direction(H, grad)
            slope = float(grad @ dx)
            if not np.isfinite(slope):
                converged, message = False, "non-finite Newton step"
                break
            # Below the round-off floor the line search can only chase noise.
            if -slope / 2.0 <= max(opt.newton_tol, problem.barrier_roundoff(x, t)):
                break
            f0 = problem.barrier_value(x, t)
            step = 1.0
            while True:
                f1 = problem.barrier_value(x + step * dx, t)
                if f1 <= f0 + opt.alpha * step * slope:
                    break
                step *= opt.beta
                if step < 1e-16:
                    break
            total += 1
            if step < 1e-16:
                # Numerical floor of the line search: accept the current center.
                break
            x = x + step * dx
            if total >= opt.max_newton_total:
                break
        else:
            converged, message = False, f"centering did not converge at t={t:.3g}"
        if not converged:
            break
        if total >= opt.max_newton_total:
            converged, message = False, "Newton iteration limit reached"
            break
        if m / t <= opt.duality_tol:
            break
        t *= opt.mu
    return x, SolverReport(converged, total, m / t, math.nan, message)


@dataclass
class InnerSolution:
    tau1: float  # sharing-phase budget the solve was run at
    tau2: float
    plan: SharingPlan
    report: SolverReport


def solve_inner(tau1: float, scenario: Scenario, options: SolverOptions | None = None) -> InnerSolution:
    """Minimum per-round time ``tau2`` when the sharing phase may last ``tau1``.

    The returned plan has bidirectional and cyclic transfers cancelled;
    its ``tau1``/``tau2`` are the achieved sharing delay and max
    compute+upload time, which never exceed the budget and the solver bound.
    """
    problem = InnerProblem(tau1, scenario, options)
    x, report = barrier_solve(problem)
    raw = problem.decode(x)
    d = cancel_circulations(raw.d, tol=1e-12 * problem.d_scale)
    plan = SharingPlan(d, raw.b_d2d, raw.p_d2d, raw.b_upload, tau1=tau1, tau2=raw.tau2)
    per_dev = compute_delays(post_share_counts(plan.d, scenario.samples), scenario) + upload_delays(plan.b_upload, scenario)
    report.max_constraint_violation = problem.relative_violation(plan)
    plan.tau2 = float(np.max(per_dev))
    plan.tau1 = min(sharing_delay(plan, scenario), tau1)
    plan.objective = total_delay(plan, scenario).total
    if report.converged and report.max_constraint_violation > problem.options.feas_tol:
        report.converged = False
        report.message = f"constraint violation {report.max_constraint_violation:.3g} exceeds feas_tol"
    return InnerSolution(tau1, plan.tau2, plan, report)


def strictly_feasible_start(tau1: float, scenario: Scenario, options: SolverOptions | None = None) -> SharingPlan:
    """The barrier method's starting point, decoded to physical units."""
    problem = InnerProblem(tau1, scenario, options)
    return problem.decode(problem.strictly_feasible_start())
