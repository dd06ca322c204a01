import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2dshare.delay import SharingPlan, baseline_T1, broadcast_delay, round_sharing, sharing_delay
from d2dshare.scenario import build_paper_scenario, make_noniid_partition
from d2dshare.training import (
    Dataset,
    EmptyPartitionError,
    SharingPolicyFallback,
    TrainingConfig,
    accuracy,
    apply_sharing_plan,
    distributed_bgd,
    global_aggregate,
    local_update,
    loss_and_gradient,
    make_synthetic_task,
    num_params,
    partition_pool,
    run_training,
)


def _toy(n=60, features=4, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, features)), rng.integers(0, classes, n))


class TestModel:
    def test_zero_weights_loss_is_log_classes(self):
        ds = _toy()
        loss, _ = loss_and_gradient(np.zeros(num_params(4, 3)), ds)
        assert loss == pytest.approx(np.log(3), rel=1e-14)

    def test_gradient_sums_to_zero_over_biases(self):
        ds = _toy()
        w = np.random.default_rng(1).standard_normal(num_params(4, 3))
        _, grad = loss_and_gradient(w, ds)
        assert abs(grad[-3:].sum()) < 1e-12

    def test_empty_partition(self):
        with pytest.raises(EmptyPartitionError):
            loss_and_gradient(np.zeros(15), Dataset(np.empty((0, 4)), np.empty(0)))

    def test_descent_step_lowers_loss(self):
        ds = _toy()
        w0 = np.zeros(num_params(4, 3))
        w1 = local_update(w0, ds, 0.1, 1)
        assert loss_and_gradient(w1, ds)[0] < loss_and_gradient(w0, ds)[0]
        _, g = loss_and_gradient(w0, ds)
        assert w1 == pytest.approx(w0 - 0.1 * g, rel=0, abs=1e-15)

    def test_accuracy_range(self):
        ds = _toy()
        assert 0.0 <= accuracy(np.zeros(15), ds) <= 1.0


class TestAggregation:
    def test_weighted_mean(self):
        out = global_aggregate([(np.array([1.0, 0.0]), 1), (np.array([0.0, 4.0]), 3)])
        assert out.tolist() == [0.25, 3.0]

    def test_identical_models(self):
        w = np.array([0.1, 0.2, 0.7])
        assert np.array_equal(global_aggregate([(w, 3), (w.copy(), 5), (w.copy(), 11)]), w)

    def test_no_samples(self):
        with pytest.raises(ValueError):
            global_aggregate([(np.zeros(2), 0), (np.ones(2), 0)])

    def test_callback_sequence(self):
        parts = [_toy(seed=s) for s in range(3)]
        seen = []
        distributed_bgd(np.zeros(15), parts, 0.1, 2, 4, lambda m, w: seen.append(m))
        assert seen == [0, 1, 2, 3, 4]


class TestData:
    def test_synthetic_task_shapes(self):
        pool, test = make_synthetic_task(10, 20, 1000, 5.0, seed=0, test_per_class=7)
        assert pool.x.shape == (1000, 20)
        assert np.bincount(pool.y).tolist() == [100] * 10
        assert len(test) == 70

    def test_synthetic_means_equidistant(self):
        pool, _ = make_synthetic_task(4, 10, 40_000, 6.0, seed=2)
        means = np.array([pool.x[pool.y == c].mean(axis=0) for c in range(4)])
        dist = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(4, 1)]
        assert dist == pytest.approx([6.0] * 6, rel=0.03)

    def test_partition_matches_histograms(self):
        hists = make_noniid_partition(10, 500, 2, seed=3)
        pool, _ = make_synthetic_task(10, 5, 10_000, 4.0, seed=3)
        parts = partition_pool(pool, hists, seed=3)
        for ds, hist in zip(parts, hists):
            assert ds.histogram(10).tolist() == list(hist)

    def test_partition_needs_enough_samples(self):
        pool, _ = make_synthetic_task(2, 3, 20, 4.0, seed=0)
        with pytest.raises(ValueError, match="class 0"):
            partition_pool(pool, [[11, 0]], seed=0)


def _labelled_parts(seed, k, num_classes=5):
    rng = np.random.default_rng(seed)
    parts = []
    offset = 0
    for _ in range(k):
        n = int(rng.integers(20, 60))
        y = rng.integers(0, num_classes, n)
        # feature 0 carries a globally unique id so the multiset check is exact
        x = np.column_stack([np.arange(offset, offset + n), rng.standard_normal(n)])
        offset += n
        parts.append(Dataset(x, y))
    return parts


def _random_grid(seed, parts):
    rng = np.random.default_rng(seed + 1)
    k = len(parts)
    d = np.zeros((k, k))
    for i, ds in enumerate(parts):
        share = rng.dirichlet(np.ones(k)) * len(ds) * rng.uniform(0, 1)
        share[i] = 0
        d[i] = np.floor(share)
    return d


class TestSharing:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 6), st.sampled_from(["proportional", "class_rebalance"]))
    def test_sample_conservation(self, seed, k, policy):
        parts = _labelled_parts(seed, k)
        d = _random_grid(seed, parts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SharingPolicyFallback)
            out = apply_sharing_plan(parts, d, policy, seed)
        sizes = [len(p) for p in parts]
        expected = np.array(sizes) + d.sum(axis=0) - d.sum(axis=1)
        assert [len(p) for p in out] == expected.astype(int).tolist()
        before = sorted(map(tuple, np.concatenate([np.column_stack([p.x, p.y]) for p in parts])))
        after = sorted(map(tuple, np.concatenate([np.column_stack([p.x, p.y]) for p in out if len(p)])))
        assert before == after

    def test_senders_only_give_own_samples(self):
        parts = _labelled_parts(0, 3)
        d = np.array([[0, 5, 0], [0, 0, 7], [0, 0, 0]])
        out = apply_sharing_plan(parts, d, "proportional", 0)
        ids0 = set(parts[0].x[:, 0])
        # device 1 forwards 7 of its own samples, never the 5 it just received
        assert len(set(out[2].x[:, 0]) & ids0) == 0

    def test_rebalance_fallback_warns(self):
        same = Dataset(np.zeros((10, 2)), np.zeros(10))
        parts = [same, Dataset(np.ones((10, 2)), np.zeros(10))]
        with pytest.warns(SharingPolicyFallback):
            apply_sharing_plan(parts, np.array([[0, 4], [0, 0]]), "class_rebalance", 0)

    def test_rebalance_prefers_missing_classes(self):
        a = Dataset(np.zeros((20, 1)), np.repeat([0, 1], 10))
        b = Dataset(np.zeros((20, 1)), np.zeros(20))
        out = apply_sharing_plan([a, b], np.array([[0, 6], [0, 0]]), "class_rebalance", 0)
        assert out[1].histogram(2).tolist() == [20, 6]

    def test_oversend_rejected(self):
        parts = _labelled_parts(0, 2)
        with pytest.raises(ValueError):
            apply_sharing_plan(parts, np.array([[0, len(parts[0]) + 1], [0, 0]]), "proportional", 0)

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            apply_sharing_plan(_labelled_parts(0, 2), np.zeros((2, 2)), "random", 0)


@pytest.fixture(scope="module")
def setup():
    sc = build_paper_scenario().with_params(global_iters_M=3)
    hists = np.array([d.label_histogram for d in sc.devices])
    pool, test = make_synthetic_task(10, 8, 50_000, 5.0, seed=0, test_per_class=50)
    return sc, partition_pool(pool, hists, 0), test


class TestRunTraining:
    def test_no_sharing_elapsed_is_baseline(self, setup):
        sc, parts, test = setup
        trace = run_training(sc, parts, None, TrainingConfig(learning_rate=0.5), test)
        assert trace.iteration == [0, 1, 2, 3]
        assert trace.elapsed_seconds[0] == 0.0
        assert trace.elapsed_seconds[-1] == pytest.approx(baseline_T1(sc), rel=1e-12)

    def test_sharing_changes_elapsed(self, setup, tmp_path):
        sc, parts, test = setup
        plan = SharingPlan.no_sharing(sc)
        plan.d[0, 5] = 1000.0
        plan.b_d2d[0, 5] = 5e5
        plan.p_d2d[0, 5] = sc.P[0]
        trace = run_training(sc, parts, plan, TrainingConfig(learning_rate=0.5), test)
        assert trace.elapsed_seconds[0] > 0
        step = trace.elapsed_seconds[2] - trace.elapsed_seconds[1]
        assert step > broadcast_delay(sc)
        path = tmp_path / "trace.csv"
        trace.write_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["iteration"]) for r in rows] == [0, 1, 2, 3]

    def test_size_mismatch(self, setup):
        sc, parts, test = setup
        with pytest.raises(ValueError, match="do not match"):
            run_training(sc, parts[:-1] + [parts[-1].take(np.arange(10))], None, None, test)


class TestSpecExamples:
    def test_stationary_point_is_fixed(self):
        # zero features and balanced labels: the uniform model has zero gradient
        ds = Dataset(np.zeros((4, 3)), [0, 1, 0, 1])
        w = np.zeros(num_params(3, 2))
        assert np.array_equal(local_update(w, ds, 0.7, 4), w)

    def test_n_steps_compose(self):
        ds = _toy()
        w = np.random.default_rng(3).standard_normal(15)
        stepwise = w
        for _ in range(3):
            stepwise = local_update(stepwise, ds, 0.05, 1)
        assert np.array_equal(local_update(w, ds, 0.05, 3), stepwise)

    def test_duplicated_samples_same_loss(self):
        ds = _toy()
        twice = Dataset.concat([ds, ds], 4)
        w = np.random.default_rng(4).standard_normal(15)
        l1, g1 = loss_and_gradient(w, ds)
        l2, g2 = loss_and_gradient(w, twice)
        assert l2 == pytest.approx(l1, rel=1e-13)
        assert g2 == pytest.approx(g1, rel=1e-12, abs=1e-15)

    def test_aggregate_examples(self):
        assert global_aggregate([(np.array([0.0]), 1), (np.array([4.0]), 3)]).tolist() == [3.0]
        assert global_aggregate([(np.array([1.0, 2.0]), 2), (np.array([3.0, 6.0]), 2)]).tolist() == [2.0, 4.0]
        assert global_aggregate([(np.array([5.0]), 0), (np.array([9.0]), 7)]).tolist() == [9.0]

    def test_single_device_is_centralized(self):
        ds = _toy()
        w0 = np.zeros(15)
        dist = distributed_bgd(w0, [ds], 0.1, 3, 4)
        assert np.array_equal(dist, local_update(w0, ds, 0.1, 12))

    def test_zero_plan_keeps_datasets(self):
        parts = _labelled_parts(1, 3)
        out = apply_sharing_plan(parts, np.zeros((3, 3)), "proportional", 0)
        for a, b in zip(parts, out):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_proportional_histogram(self):
        sender = Dataset(np.zeros((5000, 1)), np.repeat([0, 1], 2500))
        receiver = Dataset(np.zeros((10, 1)), np.full(10, 2))
        out = apply_sharing_plan([sender, receiver], np.array([[0, 1000], [0, 0]]), "proportional", 0)
        assert out[1].histogram(3).tolist() == [500, 500, 10]

    def test_zero_rounds_elapsed_is_sharing(self, setup):
        sc, parts, test = setup
        plan = SharingPlan.no_sharing(sc)
        plan.d[1, 4] = 800.4
        plan.b_d2d[1, 4] = 3e5
        plan.p_d2d[1, 4] = sc.P[1]
        trace = run_training(sc, parts, plan, TrainingConfig(global_iters=0), test)
        assert trace.iteration == [0]
        executed = SharingPlan(round_sharing(plan.d, sc.samples), plan.b_d2d, plan.p_d2d, plan.b_upload)
        assert trace.elapsed_seconds == [sharing_delay(executed, sc)]

    def test_same_seed_same_task(self):
        a = make_synthetic_task(5, 3, 500, 2.0, seed=9)
        b = make_synthetic_task(5, 3, 500, 2.0, seed=9)
        for x, y in zip(a, b):
            assert np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y)

    @pytest.mark.parametrize("separation, low, high", [(0.0, 0.05, 0.15), (6.0, 0.95, 1.0)])
    def test_separation_controls_accuracy(self, separation, low, high):
        pool, test = make_synthetic_task(10, 20, 20_000, separation, seed=1, test_per_class=500)
        w = local_update(np.zeros(num_params(20, 10)), pool, 0.5, 300)
        assert low <= accuracy(w, test) <= high
