"""Rates and delays of one D2D sharing phase followed by M rounds of distributed BGD.

Infinite delays (a link with no bandwidth or power that still has to carry
data) are returned as ``math.inf`` and propagate through ``max``; they are
never raised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scenario import DeviceProfile, Scenario, SystemParams

LN2 = math.log(2.0)


class InfeasibleLinkError(ArithmeticError):
    """A link that must carry the broadcast has zero rate."""


def shannon_rate(bandwidth, power, gain, n0):
    """``bandwidth * log2(1 + gain*power / (n0*bandwidth))`` in bits/s.

    Extended continuously to 0 at ``bandwidth == 0`` or ``power == 0``.
    Accepts scalars or broadcastable arrays.
    """
    b = np.asarray(bandwidth, dtype=float)
    p = np.asarray(power, dtype=float)
    active = (b > 0) & (p > 0)
    safe_b = np.where(active, b, 1.0)
    snr = np.asarray(gain, dtype=float) * p / (n0 * safe_b)
    rate = np.where(active, safe_b * np.log1p(np.where(active, snr, 0.0)) / LN2, 0.0)
    return float(rate) if rate.ndim == 0 else rate


def rate_ceiling(power, gain, n0):
    """Limit of the rate as bandwidth grows without bound."""
    return np.asarray(gain) * np.asarray(power) / (n0 * LN2)


def broadcast_delay(scenario: Scenario) -> float:
    p = scenario.params
    rates = shannon_rate(p.bandwidth_B, p.server_power_Ps, scenario.g, p.noise_psd_n0)
    worst = float(np.min(rates))
    if worst <= 0:
        raise InfeasibleLinkError("broadcast rate is zero for at least one device")
    return p.model_bits_Q / worst


def local_update_delay(samples, N, L, C, f):
    return N * L * np.asarray(samples, dtype=float) / (np.asarray(C, dtype=float) * np.asarray(f, dtype=float))


def compute_delays(samples, scenario: Scenario) -> np.ndarray:
    """Per-device local update time for the given per-device sample counts."""
    p = scenario.params
    return local_update_delay(samples, p.local_iters_N, p.flops_per_sample_L, scenario.C, scenario.f)


def upload_delay(bandwidth: float, device: DeviceProfile, params: SystemParams) -> float:
    rate = shannon_rate(bandwidth, device.tx_power_P, device.gain_to_server_g, params.noise_psd_n0)
    return params.model_bits_Q / rate if rate > 0 else math.inf


def upload_delays(bandwidths, scenario: Scenario) -> np.ndarray:
    p = scenario.params
    rates = np.atleast_1d(shannon_rate(bandwidths, scenario.P, scenario.g, p.noise_psd_n0))
    with np.errstate(divide="ignore"):
        return np.where(rates > 0, p.model_bits_Q / np.where(rates > 0, rates, 1.0), math.inf)


@dataclass
class SharingPlan:
    """Decision variables of the joint sharing/allocation problem.

    ``d[i, j]`` samples go from device i to device j over bandwidth
    ``b_d2d[i, j]`` with power ``p_d2d[i, j]``; ``b_upload[i]`` is the FDMA
    share used in every upload step.
    """

    d: np.ndarray
    b_d2d: np.ndarray
    p_d2d: np.ndarray
    b_upload: np.ndarray
    tau1: float = 0.0
    tau2: float = 0.0
    objective: float = math.nan

    def __post_init__(self):
        self.d = np.array(self.d, dtype=float)
        self.b_d2d = np.array(self.b_d2d, dtype=float)
        self.p_d2d = np.array(self.p_d2d, dtype=float)
        self.b_upload = np.array(self.b_upload, dtype=float)

    @property
    def K(self) -> int:
        return len(self.b_upload)

    @classmethod
    def no_sharing(cls, scenario: Scenario, b_upload=None) -> SharingPlan:
        k = scenario.K
        if b_upload is None:
            b_upload = np.full(k, scenario.params.bandwidth_B / k)
        zeros = np.zeros((k, k))
        return cls(zeros, zeros.copy(), zeros.copy(), b_upload)

    def violations(self, scenario: Scenario) -> dict[str, float]:
        """Relative violation of each constraint family (0 when satisfied)."""
        B = scenario.params.bandwidth_B
        off = ~np.eye(self.K, dtype=bool)
        samples = scenario.samples
        scale_d = max(float(samples.max()), 1.0)
        return {
            "negativity": float(
                max(0.0, -min(self.d[off].min(), self.b_d2d[off].min(), self.p_d2d[off].min(), self.b_upload.min()))
            ),
            "upload_bandwidth": max(0.0, (self.b_upload.sum() - B) / B),
            "d2d_bandwidth": max(0.0, (self.b_d2d[off].sum() - B) / B),
            "sent_samples": float(max(0.0, np.max((np.where(off, self.d, 0).sum(axis=1) - samples) / scale_d))),
            "d2d_power": float(max(0.0, np.max((np.where(off, self.p_d2d, 0).sum(axis=1) - scenario.P) / scenario.P))),
        }

    def max_violation(self, scenario: Scenario) -> float:
        return max(self.violations(scenario).values())

    def to_dict(self) -> dict:
        return {
            "d": self.d.tolist(),
            "b_d2d": self.b_d2d.tolist(),
            "p_d2d": self.p_d2d.tolist(),
            "b_upload": self.b_upload.tolist(),
            "tau1": self.tau1,
            "tau2": self.tau2,
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> SharingPlan:
        return cls(doc["d"], doc["b_d2d"], doc["p_d2d"], doc["b_upload"], doc["tau1"], doc["tau2"], doc["objective"])


@dataclass
class DelayBreakdown:
    broadcast: float
    compute: np.ndarray
    upload: np.ndarray
    sharing: float
    global_iters: int
    aggregation: float = 0.0

    @property
    def round_time(self) -> float:
        return self.broadcast + float(np.max(self.compute + self.upload)) + self.aggregation

    @property
    def total(self) -> float:
        return self.sharing + self.global_iters * self.round_time

    def to_dict(self) -> dict:
        return {
            "broadcast": self.broadcast,
            "compute": self.compute.tolist(),
            "upload": self.upload.tolist(),
            "sharing": self.sharing,
            "aggregation": self.aggregation,
            "global_iters": self.global_iters,
            "total": self.total,
        }


def sharing_delay(plan: SharingPlan, scenario: Scenario) -> float:
    off = ~np.eye(scenario.K, dtype=bool)
    moving = off & (plan.d > 0)
    if not moving.any():
        return 0.0
    n0 = scenario.params.noise_psd_n0
    rates = shannon_rate(plan.b_d2d[moving], plan.p_d2d[moving], scenario.h[moving], n0)
    bits = scenario.params.sample_bits_a * plan.d[moving]
    if np.any(rates <= 0):
        return math.inf
    return float(np.max(bits / rates))


def post_share_counts(d, initial) -> np.ndarray:
    d = np.array(d, dtype=float)
    np.fill_diagonal(d, 0.0)
    return np.asarray(initial, dtype=float) + d.sum(axis=0) - d.sum(axis=1)


def total_delay(plan: SharingPlan, scenario: Scenario, global_iters: int | None = None) -> DelayBreakdown:
    """Sharing phase plus ``global_iters`` (default M) training rounds."""
    m = scenario.params.global_iters_M if global_iters is None else global_iters
    counts = post_share_counts(plan.d, scenario.samples)
    return DelayBreakdown(
        broadcast=broadcast_delay(scenario),
        compute=compute_delays(counts, scenario),
        upload=upload_delays(plan.b_upload, scenario),
        sharing=sharing_delay(plan, scenario),
        global_iters=m,
    )


def baseline_T1(scenario: Scenario) -> float:
    """Training delay without sharing and with an equal upload bandwidth split."""
    p = scenario.params
    k = scenario.K
    per_device = compute_delays(scenario.samples, scenario) + upload_delays(np.full(k, p.bandwidth_B / k), scenario)
    return p.global_iters_M * (broadcast_delay(scenario) + float(np.max(per_device)))


def round_sharing(d, initial) -> np.ndarray:
    """Integer transfer grid close to ``d``.

    Floors every entry, then hands out the dropped units (largest fractional
    part first) wherever that moves both endpoints toward their continuous
    post-share counts without overdrawing the sender.
    """
    d = np.array(d, dtype=float)
    np.fill_diagonal(d, 0.0)
    d = np.maximum(d, 0.0)
    initial = np.asarray(initial, dtype=float)
    target = post_share_counts(d, initial)
    out = np.floor(d + 1e-9)
    frac = d - out
    order = np.argsort(-frac, axis=None, kind="stable")
    for flat in order:
        i, j = divmod(int(flat), d.shape[1])
        if i == j or frac[i, j] <= 1e-9:
            continue
        counts = post_share_counts(out, initial)
        if counts[i] - 1 >= target[i] - 0.5 and counts[j] + 1 <= target[j] + 0.5 and out[i].sum() + 1 <= initial[i]:
            out[i, j] += 1
    return out.astype(np.int64)
