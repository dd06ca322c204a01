"""Distributed full-batch gradient descent with an optional D2D sharing phase.

The learner is multinomial logistic regression (softmax cross-entropy on a
linear model). Parameters are one flat vector: the ``C x F`` weight matrix
row-major, followed by ``C`` biases.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .delay import SharingPlan, broadcast_delay, compute_delays, round_sharing, sharing_delay, upload_delays
from .scenario import Scenario

POLICIES = ("proportional", "class_rebalance")


class EmptyPartitionError(ValueError):
    """Loss requested on a device that holds no samples."""


class SharingPolicyFallback(UserWarning):
    """The requested sample-selection policy could not be met; proportional was used."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} do not line up")

    def __len__(self) -> int:
        return len(self.y)

    def histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.y, minlength=num_classes)

    def take(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx])

    @staticmethod
    def concat(parts: list[Dataset], num_features: int) -> Dataset:
        parts = [p for p in parts if len(p)]
        if not parts:
            return Dataset(np.empty((0, num_features)), np.empty(0, dtype=np.int64))
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


def num_params(num_features: int, num_classes: int) -> int:
    return num_features * num_classes + num_classes


def _unpack(w, num_features: int):
    num_classes = len(w) // (num_features + 1)
    W = w[: num_classes * num_features].reshape(num_classes, num_features)
    return W, w[num_classes * num_features :]


def loss_and_gradient(w: np.ndarray, dataset: Dataset) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over ``dataset`` and its gradient in ``w``."""
    n = len(dataset)
    if n == 0:
        raise EmptyPartitionError("loss of an empty dataset is undefined")
    W, bias = _unpack(w, dataset.x.shape[1])
    logits = dataset.x @ W.T + bias
    logits -= logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(logits).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - logits[rows, dataset.y]))
    probs = np.exp(logits - log_norm[:, None])
    probs[rows, dataset.y] -= 1.0
    probs /= n
    return loss, np.concatenate([(probs.T @ dataset.x).ravel(), probs.sum(axis=0)])


def accuracy(w: np.ndarray, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    W, bias = _unpack(w, dataset.x.shape[1])
    return float(np.mean(np.argmax(dataset.x @ W.T + bias, axis=1) == dataset.y))


def local_update(w: np.ndarray, dataset: Dataset, eta: float, steps: int) -> np.ndarray:
    """``steps`` full-batch descent steps ``w <- w - eta * grad``."""
    w = np.array(w, dtype=float)
    if len(dataset) == 0:
        return w
    for _ in range(steps):
        w -= eta * loss_and_gradient(w, dataset)[1]
    return w


def global_aggregate(models) -> np.ndarray:
    """Sample-count weighted average of ``(w_i, n_i)`` pairs, summed in list order."""
    models = list(models)
    total = float(sum(n for _, n in models))
    if total <= 0:
        raise ValueError("cannot aggregate: every device holds zero samples")
    if len({id(w) for w, _ in models}) == 1 or all(np.array_equal(models[0][0], w) for w, _ in models):
        return np.array(models[0][0], dtype=float)
    out = np.zeros_like(np.asarray(models[0][0], dtype=float))
    for w, n in models:
        out += (n / total) * np.asarray(w, dtype=float)
    return out


def global_loss(w: np.ndarray, datasets: list[Dataset]) -> float:
    """Sample-weighted mean of the local losses."""
    total = sum(len(ds) for ds in datasets)
    return sum(len(ds) * loss_and_gradient(w, ds)[0] for ds in datasets if len(ds)) / total


def distributed_bgd(w0, datasets: list[Dataset], eta: float, local_steps: int, rounds: int, on_round=None):
    """Run ``rounds`` of broadcast -> local update -> weighted aggregation.

    ``on_round(m, w)`` is called after each aggregation (and with ``m=0``
    for the initial model). Returns the final global model.
    """
    w = np.array(w0, dtype=float)
    counts = [len(ds) for ds in datasets]
    if on_round is not None:
        on_round(0, w)
    for m in range(1, rounds + 1):
        local = [local_update(w, ds, eta, local_steps) for ds in datasets]
        w = global_aggregate(zip(local, counts))
        if on_round is not None:
            on_round(m, w)
    return w


# ---------------------------------------------------------------------------
# Data


def make_synthetic_task(
    num_classes: int,
    features: int,
    samples_total: int,
    class_separation: float,
    seed: int,
    test_per_class: int = 200,
) -> tuple[Dataset, Dataset]:
    """Balanced Gaussian clusters with unit covariance; class means are ``class_separation`` apart.

    Returns the training pool (``samples_total`` rounded down to a multiple of
    ``num_classes``) and a disjoint test set drawn from the same clusters.
    """
    if num_classes < 1 or features < 1 or samples_total < num_classes:
        raise ValueError("num_classes, features and samples_total must be positive")
    rng = np.random.default_rng(seed)
    if features >= num_classes:
        basis, _ = np.linalg.qr(rng.standard_normal((features, num_classes)))
        directions = basis.T
    else:
        directions = rng.standard_normal((num_classes, features))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (class_separation / np.sqrt(2.0))

    def draw(per_class):
        y = np.repeat(np.arange(num_classes), per_class)
        x = means[y] + rng.standard_normal((len(y), features))
        return Dataset(x, y)

    return draw(samples_total // num_classes), draw(test_per_class)


def partition_pool(pool: Dataset, histograms, seed: int) -> list[Dataset]:
    """Deal samples from ``pool`` to devices so device ``i`` matches ``histograms[i]``."""
    rng = np.random.default_rng(seed)
    histograms = np.asarray(histograms, dtype=np.int64)
    num_classes = histograms.shape[1]
    by_class = [rng.permutation(np.flatnonzero(pool.y == c)) for c in range(num_classes)]
    demand = histograms.sum(axis=0)
    for c in range(num_classes):
        if demand[c] > len(by_class[c]):
            raise ValueError(f"class {c}: devices need {demand[c]} samples, pool has {len(by_class[c])}")
    cursor = np.zeros(num_classes, dtype=np.int64)
    out = []
    for hist in histograms:
        idx = []
        for c, n in enumerate(hist):
            idx.append(by_class[c][cursor[c] : cursor[c] + n])
            cursor[c] += n
        out.append(pool.take(np.concatenate(idx)))
    return out


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    if total == 0 or weights.sum() == 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = weights / weights.sum() * total
    out = np.floor(exact).astype(np.int64)
    for k in np.argsort(-(exact - out), kind="stable")[: total - out.sum()]:
        out[k] += 1
    return out


def _proportional_pick(labels, available, amount, num_classes, rng):
    """Indices (into ``labels``) of ``amount`` samples, stratified by class shares."""
    counts = np.bincount(labels[available], minlength=num_classes)
    quota = _largest_remainder(counts.astype(float), amount)
    picked = []
    for c in np.flatnonzero(quota):
        pool = available[labels[available] == c]
        picked.append(rng.choice(pool, size=quota[c], replace=False))
    return np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)


def _rebalance_pick(labels, available, amount, receiver_hist, num_classes, rng):
    """Prefer classes the sender holds more of than the receiver; ``None`` if that cannot fill ``amount``."""
    counts = np.bincount(labels[available], minlength=num_classes)
    surplus = np.maximum(counts - receiver_hist, 0)
    if surplus.sum() < amount:
        return None
    quota = np.zeros(num_classes, dtype=np.int64)
    remaining = amount
    # Water-fill: repeatedly take from the class with the largest remaining surplus.
    order_key = surplus.astype(float)
    while remaining:
        c = int(np.argmax(order_key))
        quota[c] += 1
        order_key[c] -= 1
        remaining -= 1
    picked = []
    for c in np.flatnonzero(quota):
        pool = available[labels[available] == c]
        picked.append(rng.choice(pool, size=quota[c], replace=False))
    return np.concatenate(picked)


def apply_sharing_plan(datasets: list[Dataset], d, policy: str = "proportional", seed: int = 0) -> list[Dataset]:
    """Move ``d[i, j]`` samples from device i to device j (``d`` is rounded to integers).

    Senders only give away samples they held before sharing. The multiset of
    all samples is conserved.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown sharing policy {policy!r}; expected one of {POLICIES}")
    sizes = np.array([len(ds) for ds in datasets], dtype=float)
    d = np.asarray(d, dtype=float)
    if not np.allclose(d, np.round(d)):
        d = round_sharing(d, sizes)
    d = np.round(d).astype(np.int64)
    np.fill_diagonal(d, 0)
    if np.any(d < 0) or np.any(d.sum(axis=1) > sizes):
        raise ValueError("transfer grid sends more samples than a device holds")
    K = len(datasets)
    num_features = datasets[0].x.shape[1]
    num_classes = int(max(ds.y.max() for ds in datasets if len(ds)) + 1) if sizes.sum() else 1
    rng = np.random.default_rng(seed)
    received: list[list[Dataset]] = [[] for _ in range(K)]
    kept = []
    use_policy = policy
    if policy == "class_rebalance":
        picks = _plan_rebalance(datasets, d, num_classes, rng)
        if picks is None:
            warnings.warn(
                "class_rebalance cannot satisfy the transfer counts; using proportional selection",
                SharingPolicyFallback,
                stacklevel=2,
            )
            use_policy = "proportional"
            rng = np.random.default_rng(seed)
    if use_policy == "proportional":
        picks = {}
        for i, ds in enumerate(datasets):
            available = np.arange(len(ds))
            for j in range(K):
                if d[i, j]:
                    idx = _proportional_pick(ds.y, available, int(d[i, j]), num_classes, rng)
                    picks[i, j] = idx
                    available = np.setdiff1d(available, idx, assume_unique=True)
    for i, ds in enumerate(datasets):
        sent = [picks[i, j] for j in range(K) if (i, j) in picks]
        mask = np.ones(len(ds), dtype=bool)
        for idx in sent:
            mask[idx] = False
        kept.append(ds.take(np.flatnonzero(mask)))
        for j in range(K):
            if (i, j) in picks:
                received[j].append(ds.take(np.sort(picks[i, j])))
    return [Dataset.concat([kept[j]] + received[j], num_features) for j in range(K)]


def _plan_rebalance(datasets, d, num_classes, rng):
    K = len(datasets)
    hists = [ds.histogram(num_classes) for ds in datasets]
    picks = {}
    for i, ds in enumerate(datasets):
        available = np.arange(len(ds))
        for j in range(K):
            if d[i, j]:
                idx = _rebalance_pick(ds.y, available, int(d[i, j]), hists[j], num_classes, rng)
                if idx is None:
                    return None
                picks[i, j] = idx
                available = np.setdiff1d(available, idx, assume_unique=True)
    return picks


# ---------------------------------------------------------------------------
# Full simulation


@dataclass
class TrainingConfig:
    global_iters: int | None = None  # defaults to scenario M
    local_iters: int | None = None  # defaults to scenario N
    learning_rate: float | None = None  # defaults to scenario eta
    policy: str = "proportional"
    seed: int = 0


@dataclass
class TrainingTrace:
    iteration: list = field(default_factory=list)
    elapsed_seconds: list = field(default_factory=list)
    global_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)

    def append(self, m, elapsed, loss, acc):
        self.iteration.append(m)
        self.elapsed_seconds.append(elapsed)
        self.global_loss.append(loss)
        self.test_accuracy.append(acc)

    @property
    def final_accuracy(self) -> float:
        return self.test_accuracy[-1]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "elapsed_seconds", "global_loss", "test_accuracy"])
            for row in zip(self.iteration, self.elapsed_seconds, self.global_loss, self.test_accuracy):
                writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


def run_training(
    scenario: Scenario,
    datasets: list[Dataset],
    plan: SharingPlan | None,
    config: TrainingConfig | None,
    test_set: Dataset,
) -> TrainingTrace:
    """Share data per ``plan`` once, then run M rounds of distributed BGD.

    Elapsed time is modeled, not measured: the sharing delay of the integer
    transfer grid, plus one broadcast and the slowest compute+upload per round.
    """
    cfg = config or TrainingConfig()
    prm = scenario.params
    M = prm.global_iters_M if cfg.global_iters is None else cfg.global_iters
    N = prm.local_iters_N if cfg.local_iters is None else cfg.local_iters
    eta = prm.learning_rate_eta if cfg.learning_rate is None else cfg.learning_rate
    sizes = np.array([len(ds) for ds in datasets], dtype=float)
    if len(datasets) != scenario.K or not np.array_equal(sizes, scenario.samples):
        raise ValueError(f"dataset sizes {sizes.tolist()} do not match scenario counts {scenario.samples.tolist()}")
    if plan is None:
        plan = SharingPlan.no_sharing(scenario)
    d_int = round_sharing(plan.d, sizes) if np.any(plan.d > 0) else np.zeros_like(plan.d)
    executed = SharingPlan(d_int, plan.b_d2d, plan.p_d2d, plan.b_upload)
    shared = apply_sharing_plan(datasets, d_int, cfg.policy, cfg.seed) if d_int.any() else list(datasets)

    counts = np.array([len(ds) for ds in shared], dtype=float)
    t_share = sharing_delay(executed, scenario)
    t_round = broadcast_delay(scenario) + float(np.max(compute_delays(counts, scenario) + upload_delays(plan.b_upload, scenario)))
    trace = TrainingTrace()
    nonempty = [ds for ds in shared if len(ds)]

    def on_round(m, w):
        trace.append(m, t_share + m * t_round, global_loss(w, nonempty), accuracy(w, test_set))

    w0 = np.zeros(num_params(test_set.x.shape[1], _num_classes(shared, test_set)))
    distributed_bgd(w0, shared, eta, N, M, on_round)
    return trace


def _num_classes(datasets, test_set) -> int:
    labels = [ds.y.max() for ds in datasets if len(ds)] + [test_set.y.max()]
    return int(max(labels)) + 1
