import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2dshare.convex import (
    BracketError,
    bisect,
    cancel_circulations,
    min_bandwidth_for_rate,
    solve_inner,
    strictly_feasible_start,
)
from d2dshare.delay import compute_delays, post_share_counts, rate_ceiling, shannon_rate, sharing_delay, upload_delays
from d2dshare.optimizer import solve_p2
from d2dshare.scenario import build_homogeneous_scenario, build_paper_scenario, build_random_scenario

from oracles import inner_grid_tau2, two_device_scenario

N0 = 1e-16


class TestBisect:
    def test_increasing(self):
        x = bisect(lambda v: v**3, 8.0, 0.0, 10.0, 1e-12)
        assert x == pytest.approx(2.0, abs=1e-12)

    def test_decreasing(self):
        x = bisect(lambda v: -v, -0.3, 0.0, 1.0, 1e-12)
        assert x == pytest.approx(0.3, abs=1e-12)

    def test_endpoint_hit(self):
        assert bisect(lambda v: v, 0.0, 0.0, 1.0, 1e-9) == 0.0

    def test_iteration_count(self):
        calls = []

        def f(v):
            calls.append(v)
            return v

        bisect(f, 0.123, 0.0, 1.0, 2.0**-20)
        assert len(calls) == 2 + 20

    def test_not_bracketed(self):
        with pytest.raises(BracketError):
            bisect(lambda v: v, 5.0, 0.0, 1.0, 1e-9)

    def test_empty_interval(self):
        with pytest.raises(BracketError):
            bisect(lambda v: v, 0.5, 1.0, 0.0, 1e-9)


class TestMinBandwidth:
    def test_non_positive_rate(self):
        assert min_bandwidth_for_rate(0.0, 1.0, 1e-9, N0) == 0.0

    def test_at_ceiling_unreachable(self):
        cap = float(rate_ceiling(1.0, 1e-9, N0))
        assert min_bandwidth_for_rate(cap, 1.0, 1e-9, N0) is None
        assert min_bandwidth_for_rate(2 * cap, 1.0, 1e-9, N0) is None

    @settings(max_examples=200)
    @given(st.floats(1e-4, 0.999), st.floats(1e-3, 5.0), st.floats(1e-13, 1e-5))
    def test_reaches_rate_and_is_tight(self, frac, power, gain):
        target = frac * float(rate_ceiling(power, gain, N0))
        b = min_bandwidth_for_rate(target, power, gain, N0)
        assert b is not None and b > 0
        assert shannon_rate(b, power, gain, N0) >= target
        assert shannon_rate(b * (1 - 1e-9), power, gain, N0) <= target * (1 + 1e-12)


def _random_flows(seed, k, density):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 100, (k, k)) * (rng.random((k, k)) < density)
    np.fill_diagonal(d, 0)
    return d


def _is_acyclic(d):
    k = d.shape[0]
    adj = d > 0
    indeg = adj.sum(axis=0)
    queue = [v for v in range(k) if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for w in np.flatnonzero(adj[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(int(w))
    return seen == k


class TestCancelCirculations:
    def test_two_cycle(self):
        out = cancel_circulations(np.array([[0, 30.0], [12.0, 0]]))
        assert out.tolist() == [[0, 18.0], [0, 0]]

    def test_three_cycle(self):
        d = np.array([[0, 5.0, 0], [0, 0, 7.0], [3.0, 0, 0]])
        out = cancel_circulations(d)
        assert out.tolist() == [[0, 2.0, 0], [0, 0, 4.0], [0, 0, 0]]

    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.floats(0.1, 1.0))
    def test_properties(self, seed, k, density):
        d = _random_flows(seed, k, density)
        out = cancel_circulations(d)
        net_in = d.sum(axis=0) - d.sum(axis=1)
        assert np.allclose(out.sum(axis=0) - out.sum(axis=1), net_in, atol=1e-9)
        assert np.all(out <= d + 1e-12)
        assert np.all(out >= 0)
        assert np.all(np.minimum(out, out.T) == 0)
        assert _is_acyclic(out)


def _check_feasible(plan, sc, tau1, tol=1e-6):
    assert plan.max_violation(sc) <= tol
    if tau1 == 0:
        assert np.all(plan.d == 0)
    else:
        assert sharing_delay(plan, sc) <= tau1 * (1 + tol)


class TestInnerSolve:
    def test_start_is_strictly_feasible(self):
        sc = build_paper_scenario()
        for tau1 in (0.0, 0.5, 100.0, 1e4):
            plan = strictly_feasible_start(tau1, sc)
            assert plan.max_violation(sc) == 0.0
            assert np.all(plan.b_upload > 0)
            if tau1 > 0:
                assert sharing_delay(plan, sc) < tau1

    def test_zero_budget_matches_adaptive_split(self):
        sc = build_paper_scenario()
        sol = solve_inner(0.0, sc)
        assert sol.report.converged
        assert np.all(sol.plan.d == 0)
        assert sol.tau2 == pytest.approx(solve_p2(sc).plan.tau2, rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_solution_feasible(self, seed):
        sc = build_random_scenario(seed)
        for tau1 in (1.0, 50.0, 2000.0):
            sol = solve_inner(tau1, sc)
            assert sol.report.converged, sol.report.message
            _check_feasible(sol.plan, sc, tau1)
            per_dev = compute_delays(post_share_counts(sol.plan.d, sc.samples), sc) + upload_delays(sol.plan.b_upload, sc)
            assert sol.tau2 == pytest.approx(float(per_dev.max()), rel=1e-12)

    def test_tau2_non_increasing_in_budget(self):
        sc = build_paper_scenario()
        budgets = [0.0, 1.0, 10.0, 100.0, 1000.0, 5000.0]
        values = [solve_inner(t, sc).tau2 for t in budgets]
        for a, b in zip(values, values[1:]):
            assert b <= a * (1 + 1e-6)

    def test_no_bidirectional_transfers(self):
        sol = solve_inner(300.0, build_paper_scenario())
        d = sol.plan.d
        assert np.all(np.minimum(d, d.T) == 0)

    @pytest.mark.parametrize("tau1", [3.0, 10.0])
    def test_two_device_grid(self, tau1):
        sc = two_device_scenario(m=5)
        grid = inner_grid_tau2(sc, tau1, n=201)
        solved = solve_inner(tau1, sc).tau2
        assert solved <= grid * (1 + 1e-9)
        assert abs(solved - grid) / grid <= 1e-3

    def test_report_fields(self):
        sol = solve_inner(10.0, build_paper_scenario())
        doc = sol.report.to_dict()
        assert doc["converged"] is True
        assert doc["final_duality_measure"] <= 1e-8
        assert doc["iterations"] > 0
        assert math.isfinite(doc["max_constraint_violation"])


@pytest.mark.parametrize("b_star", [1e2, 3.7e4, 1e6, 5e7])
def test_min_bandwidth_inverts_forward_rate(b_star):
    target = float(shannon_rate(b_star, 0.8, 2e-9, N0))
    assert min_bandwidth_for_rate(target, 0.8, 2e-9, N0) == pytest.approx(b_star, rel=1e-9)


def test_homogeneous_inner_solve_is_symmetric():
    sc = build_homogeneous_scenario()
    sol = solve_inner(500.0, sc)
    assert sol.report.converged
    assert float(sol.plan.d.max()) <= 1e-6 * float(sc.samples.max())
    assert sol.plan.b_upload == pytest.approx([sc.params.bandwidth_B / sc.K] * sc.K, rel=1e-4)
