"""System configuration: radio/training constants, devices, D2D channels.

All quantities are stored in linear SI units (W, W/Hz, Hz, linear power
gain). dBm/dB values are only accepted at the JSON boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SPEC_VERSION = 1


class ScenarioError(ValueError):
    """Invalid or unparsable scenario configuration."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) / 1000.0


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def path_loss_gain(distance: float, beta0: float, d0: float = 1.0, alpha: float = 3.0) -> float:
    """Power gain ``beta0 * (distance / d0) ** -alpha``."""
    if not distance > 0:
        raise ValueError(f"distance must be > 0, got {distance}")
    if not d0 > 0:
        raise ValueError(f"d0 must be > 0, got {d0}")
    if not beta0 > 0:
        raise ValueError(f"beta0 must be > 0, got {beta0}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return beta0 * (distance / d0) ** (-alpha)


@dataclass(frozen=True)
class SystemParams:
    bandwidth_B: float
    noise_psd_n0: float
    server_power_Ps: float
    model_bits_Q: float
    flops_per_sample_L: float
    local_iters_N: int
    global_iters_M: int
    sample_bits_a: float
    learning_rate_eta: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ScenarioError(f"params.{f.name} must be a finite positive number, got {value!r}")
        for name in ("local_iters_N", "global_iters_M"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ScenarioError(f"params.{name} must be an integer >= 1, got {value!r}")
            object.__setattr__(self, name, int(value))


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    flops_per_cycle_C: float
    cpu_freq_f: float
    tx_power_P: float
    gain_to_server_g: float
    initial_samples: int
    label_histogram: tuple[int, ...]

    def __post_init__(self):
        where = f"devices[{self.id}]"
        if not self.flops_per_cycle_C >= 1:
            raise ScenarioError(f"{where}.flops_per_cycle_C must be >= 1, got {self.flops_per_cycle_C!r}")
        if not self.cpu_freq_f > 0:
            raise ScenarioError(f"{where}.cpu_freq_f must be > 0, got {self.cpu_freq_f!r}")
        if not self.tx_power_P > 0:
            raise ScenarioError(f"{where}.tx_power_P must be > 0, got {self.tx_power_P!r}")
        if not 0 < self.gain_to_server_g <= 1:
            raise ScenarioError(f"{where}.gain_to_server_g must be in (0, 1], got {self.gain_to_server_g!r}")
        if int(self.initial_samples) != self.initial_samples or self.initial_samples < 0:
            raise ScenarioError(f"{where}.initial_samples must be a non-negative integer, got {self.initial_samples!r}")
        object.__setattr__(self, "initial_samples", int(self.initial_samples))
        hist = tuple(int(c) for c in self.label_histogram)
        if any(c < 0 for c in hist):
            raise ScenarioError(f"{where}.label_histogram has negative counts")
        if sum(hist) != self.initial_samples:
            raise ScenarioError(
                f"{where}.label_histogram sums to {sum(hist)}, expected initial_samples={self.initial_samples}"
            )
        object.__setattr__(self, "label_histogram", hist)


@dataclass(frozen=True)
class D2DChannelMatrix:
    """Pairwise link gains; ``gains[i][j]`` is the gain of link i -> j."""

    gains: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        rows = tuple(tuple(float(v) for v in row) for row in self.gains)
        k = len(rows)
        for i, row in enumerate(rows):
            if len(row) != k:
                raise ScenarioError(f"d2d.gains must be square, row {i} has length {len(row)} (expected {k})")
            for j, v in enumerate(row):
                if i != j and not 0 < v <= 1:
                    raise ScenarioError(f"d2d.gains[{i}][{j}] must be in (0, 1], got {v!r}")
        object.__setattr__(self, "gains", rows)

    @property
    def size(self) -> int:
        return len(self.gains)

    @property
    def is_symmetric(self) -> bool:
        k = self.size
        return all(self.gains[i][j] == self.gains[j][i] for i in range(k) for j in range(k))

    def as_array(self) -> np.ndarray:
        h = np.array(self.gains, dtype=float)
        np.fill_diagonal(h, 0.0)
        return h


@dataclass(frozen=True)
class Scenario:
    params: SystemParams
    devices: tuple[DeviceProfile, ...]
    d2d: D2DChannelMatrix
    geometry: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if len(self.devices) < 2:
            raise ScenarioError(f"K ≥ 2 required, got K={len(self.devices)}")
        if self.d2d.size != len(self.devices):
            raise ScenarioError(f"d2d.gains dimension {self.d2d.size} does not match K={len(self.devices)}")
        if self.geometry is not None:
            geometry = tuple((float(x), float(y)) for x, y in self.geometry)
            if len(geometry) != len(self.devices):
                raise ScenarioError(f"geometry has {len(geometry)} entries, expected K={len(self.devices)}")
            object.__setattr__(self, "geometry", geometry)

    @property
    def K(self) -> int:
        return len(self.devices)

    # Vectorized per-device views; safe to cache because the dataclass is frozen.
    @cached_property
    def C(self) -> np.ndarray:
        return np.array([d.flops_per_cycle_C for d in self.devices], dtype=float)

    @cached_property
    def f(self) -> np.ndarray:
        return np.array([d.cpu_freq_f for d in self.devices], dtype=float)

    @cached_property
    def P(self) -> np.ndarray:
        return np.array([d.tx_power_P for d in self.devices], dtype=float)

    @cached_property
    def g(self) -> np.ndarray:
        return np.array([d.gain_to_server_g for d in self.devices], dtype=float)

    @cached_property
    def samples(self) -> np.ndarray:
        return np.array([d.initial_samples for d in self.devices], dtype=float)

    @cached_property
    def h(self) -> np.ndarray:
        return self.d2d.as_array()

    def with_params(self, **changes) -> Scenario:
        return replace(self, params=replace(self.params, **changes))

    def with_devices(self, **changes) -> Scenario:
        """Apply the same field changes to every device."""
        return replace(self, devices=tuple(replace(d, **changes) for d in self.devices))


# ---------------------------------------------------------------------------
# Builders


SERVER_DISTANCE_M = 350.0
BETA0_1M = db_to_linear(-30.0)
PATH_LOSS_EXPONENT = 3.0


def make_noniid_partition(
    num_classes: int, samples_per_device: int, labels_per_device: int, seed: int, num_devices: int = 6
) -> list[tuple[int, ...]]:
    """Label histograms where each device holds ``labels_per_device`` classes in equal shares.

    Classes are dealt round-robin from a seeded permutation, so every class is
    used before any is repeated and a device never gets the same class twice.
    """
    if not 1 <= labels_per_device <= num_classes:
        raise ScenarioError(
            f"labels_per_device={labels_per_device} must be between 1 and num_classes={num_classes}"
        )
    if samples_per_device % labels_per_device:
        raise ScenarioError(
            f"samples_per_device={samples_per_device} is not divisible by labels_per_device={labels_per_device}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    share = samples_per_device // labels_per_device
    histograms = []
    for i in range(num_devices):
        hist = [0] * num_classes
        for k in range(labels_per_device):
            hist[int(order[(i * labels_per_device + k) % num_classes])] = share
        histograms.append(tuple(hist))
    return histograms


def disc_positions(k: int, center: tuple[float, float], radius: float, seed: int) -> list[tuple[float, float]]:
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.random(k))
    theta = 2.0 * np.pi * rng.random(k)
    return [(center[0] + ri * math.cos(ti), center[1] + ri * math.sin(ti)) for ri, ti in zip(r, theta)]


def d2d_from_geometry(
    positions: Sequence[tuple[float, float]],
    beta0: float = BETA0_1M,
    alpha: float = PATH_LOSS_EXPONENT,
    min_distance: float = 1.0,
) -> D2DChannelMatrix:
    """Symmetric pairwise gains from positions; distances are floored at ``min_distance``."""
    k = len(positions)
    gains = [[0.0] * k for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            dist = math.dist(positions[i], positions[j])
            gains[i][j] = gains[j][i] = path_loss_gain(max(dist, min_distance), beta0, 1.0, alpha)
    return D2DChannelMatrix(tuple(tuple(row) for row in gains))


def build_paper_scenario(
    seed: int = 0, disc_radius: float = 100.0, num_classes: int = 10, labels_per_device: int = 2
) -> Scenario:
    params = SystemParams(
        bandwidth_B=1e6,
        noise_psd_n0=dbm_to_watts(-130.0),
        server_power_Ps=dbm_to_watts(43.0),
        model_bits_Q=3.2e9,
        flops_per_sample_L=6e9,
        local_iters_N=5,
        global_iters_M=1,
        sample_bits_a=784 * 8 + 4,
        learning_rate_eta=0.01,
    )
    C = (8, 8, 12, 12, 16, 16)
    f = (1.5e9, 1.5e9, 1.95e9, 1.95e9, 2.5e9, 2.5e9)
    samples = 5000
    g = path_loss_gain(SERVER_DISTANCE_M, BETA0_1M, 1.0, PATH_LOSS_EXPONENT)
    histograms = make_noniid_partition(num_classes, samples, labels_per_device, seed, num_devices=len(C))
    devices = tuple(
        DeviceProfile(
            id=i,
            flops_per_cycle_C=C[i],
            cpu_freq_f=f[i],
            tx_power_P=dbm_to_watts(33.0),
            gain_to_server_g=g,
            initial_samples=samples,
            label_histogram=histograms[i],
        )
        for i in range(len(C))
    )
    positions = disc_positions(len(C), (SERVER_DISTANCE_M, 0.0), disc_radius, seed)
    return Scenario(params, devices, d2d_from_geometry(positions), tuple(positions))


def build_random_scenario(
    seed: int,
    k: int = 6,
    num_classes: int = 10,
    samples_range: tuple[int, int] = (1000, 8000),
    params: SystemParams | None = None,
) -> Scenario:
    """Heterogeneous scenario: random CPUs, powers, server distances and loads."""
    if k < 2:
        raise ScenarioError(f"K ≥ 2 required, got K={k}")
    rng = np.random.default_rng(seed)
    if params is None:
        params = build_paper_scenario().params
    positions = []
    devices = []
    for i in range(k):
        dist = rng.uniform(200.0, 400.0)
        angle = rng.uniform(-0.5, 0.5)
        positions.append((dist * math.cos(angle), dist * math.sin(angle)))
        samples = 2 * int(rng.integers(samples_range[0] // 2, samples_range[1] // 2 + 1))
        classes = rng.choice(num_classes, size=2, replace=False)
        hist = [0] * num_classes
        for c in classes:
            hist[int(c)] = samples // 2
        devices.append(
            DeviceProfile(
                id=i,
                flops_per_cycle_C=float(rng.choice([8, 12, 16])),
                cpu_freq_f=float(rng.uniform(1.0e9, 3.0e9)),
                tx_power_P=dbm_to_watts(float(rng.uniform(27.0, 33.0))),
                gain_to_server_g=path_loss_gain(dist, BETA0_1M, 1.0, PATH_LOSS_EXPONENT),
                initial_samples=samples,
                label_histogram=tuple(hist),
            )
        )
    return Scenario(params, tuple(devices), d2d_from_geometry(positions), tuple(positions))


def build_homogeneous_scenario(k: int = 4, samples: int = 5000, distance: float = 50.0) -> Scenario:
    """Identical devices with identical pairwise gains (no reason to share)."""
    base = build_paper_scenario()
    hist = make_noniid_partition(10, samples, 10, 0, num_devices=1)[0]
    device = replace(base.devices[0], flops_per_cycle_C=12, cpu_freq_f=2e9, initial_samples=samples,
                     label_histogram=hist)
    h = path_loss_gain(distance, BETA0_1M, 1.0, PATH_LOSS_EXPONENT)
    gains = tuple(tuple(0.0 if i == j else h for j in range(k)) for i in range(k))
    return Scenario(base.params, tuple(replace(device, id=i) for i in range(k)), D2DChannelMatrix(gains))


# ---------------------------------------------------------------------------
# JSON ingestion


def _power_to_json(watts: float) -> dict:
    return {"watts": watts}


def _power_from_json(value, where: str) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, dict) and len(value) == 1:
        ((unit, v),) = value.items()
        if unit == "watts":
            return float(v)
        if unit == "dbm":
            return dbm_to_watts(float(v))
    raise ScenarioError(f"{where}: expected a number or {{'watts': x}} / {{'dbm': x}}, got {value!r}")


def _gain_from_json(value, where: str) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, dict) and len(value) == 1:
        ((unit, v),) = value.items()
        if unit == "linear":
            return float(v)
        if unit == "db":
            return db_to_linear(float(v))
    raise ScenarioError(f"{where}: expected a number or {{'linear': x}} / {{'db': x}}, got {value!r}")


def _psd_from_json(value, where: str) -> float:
    if isinstance(value, dict) and len(value) == 1 and "dbm_per_hz" in value:
        return dbm_to_watts(float(value["dbm_per_hz"]))
    if isinstance(value, dict) and len(value) == 1 and "watts_per_hz" in value:
        return float(value["watts_per_hz"])
    return _power_from_json(value, where)


def scenario_to_dict(scenario: Scenario) -> dict:
    p = scenario.params
    return {
        "spec_version": SPEC_VERSION,
        "params": {
            "bandwidth_B": p.bandwidth_B,
            "noise_psd_n0": {"watts_per_hz": p.noise_psd_n0},
            "server_power_Ps": _power_to_json(p.server_power_Ps),
            "model_bits_Q": p.model_bits_Q,
            "flops_per_sample_L": p.flops_per_sample_L,
            "local_iters_N": p.local_iters_N,
            "global_iters_M": p.global_iters_M,
            "sample_bits_a": p.sample_bits_a,
            "learning_rate_eta": p.learning_rate_eta,
        },
        "devices": [
            {
                "id": d.id,
                "flops_per_cycle_C": d.flops_per_cycle_C,
                "cpu_freq_f": d.cpu_freq_f,
                "tx_power_P": _power_to_json(d.tx_power_P),
                "gain_to_server_g": d.gain_to_server_g,
                "initial_samples": d.initial_samples,
                "label_histogram": list(d.label_histogram),
            }
            for d in scenario.devices
        ],
        "d2d": {"gains": [list(row) for row in scenario.d2d.gains]},
        "geometry": None if scenario.geometry is None else [list(xy) for xy in scenario.geometry],
    }


def _require(mapping: dict, key: str, where: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ScenarioError(f"{where}: missing field '{key}'")
    return mapping[key]


def scenario_from_dict(doc: dict) -> Scenario:
    version = _require(doc, "spec_version", "scenario")
    if version != SPEC_VERSION:
        raise ScenarioError(f"scenario.spec_version: unsupported version {version!r} (expected {SPEC_VERSION})")
    raw = _require(doc, "params", "scenario")
    try:
        params = SystemParams(
            bandwidth_B=float(_require(raw, "bandwidth_B", "params")),
            noise_psd_n0=_psd_from_json(_require(raw, "noise_psd_n0", "params"), "params.noise_psd_n0"),
            server_power_Ps=_power_from_json(_require(raw, "server_power_Ps", "params"), "params.server_power_Ps"),
            model_bits_Q=float(_require(raw, "model_bits_Q", "params")),
            flops_per_sample_L=float(_require(raw, "flops_per_sample_L", "params")),
            local_iters_N=_require(raw, "local_iters_N", "params"),
            global_iters_M=_require(raw, "global_iters_M", "params"),
            sample_bits_a=float(_require(raw, "sample_bits_a", "params")),
            learning_rate_eta=float(_require(raw, "learning_rate_eta", "params")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"params: {exc}") from exc
    raw_devices = _require(doc, "devices", "scenario")
    if not isinstance(raw_devices, list):
        raise ScenarioError("scenario.devices must be a list")
    devices = []
    for idx, rd in enumerate(raw_devices):
        where = f"devices[{idx}]"
        devices.append(
            DeviceProfile(
                id=int(rd.get("id", idx)),
                flops_per_cycle_C=float(_require(rd, "flops_per_cycle_C", where)),
                cpu_freq_f=float(_require(rd, "cpu_freq_f", where)),
                tx_power_P=_power_from_json(_require(rd, "tx_power_P", where), f"{where}.tx_power_P"),
                gain_to_server_g=_gain_from_json(_require(rd, "gain_to_server_g", where), f"{where}.gain_to_server_g"),
                initial_samples=_require(rd, "initial_samples", where),
                label_histogram=tuple(_require(rd, "label_histogram", where)),
            )
        )
    if len(devices) < 2:
        raise ScenarioError(f"K ≥ 2 required, got K={len(devices)}")
    raw_d2d = _require(doc, "d2d", "scenario")
    gains = _require(raw_d2d, "gains", "d2d")
    d2d = D2DChannelMatrix(
        tuple(
            tuple(0.0 if i == j else _gain_from_json(v, f"d2d.gains[{i}][{j}]") for j, v in enumerate(row))
            for i, row in enumerate(gains)
        )
    )
    geometry = doc.get("geometry")
    if geometry is not None:
        geometry = tuple((float(x), float(y)) for x, y in geometry)
    return Scenario(params, tuple(devices), d2d, geometry)


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n", encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be a JSON object")
    return scenario_from_dict(doc)
