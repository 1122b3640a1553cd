"""
Deterministic scenario generator standing in for the physical testbed.

Static reference nodes sit along one edge of the arena, mobile nodes follow
seeded random-waypoint paths, and ranges are produced from ground truth
with Gaussian noise, positive NLOS bias, and an optional byzantine node
whose every range is inflated by a constant offset.

All randomness comes from ``numpy.random.default_rng`` seeded with
``[seed, stream, index]`` so each timestamp has its own substream; the
anomaly injection consumes no randomness, so a scenario and its
anomaly-free twin share identical noise.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ArenaTooSmallError, ConfigError
from .geometry import SPEED_OF_LIGHT, TimingPair, tof_distance
from .layouts import RangeTable

TRUTH_HEADER = ("timestamp_s", "node", "x_m", "y_m")
_TRUTH_STREAM = 0
_RANGE_STREAM = 1


@dataclass(frozen=True)
class NlosSpec:
    """Non-line-of-sight bias applied to every pair touching ``nodes`` and to ``pairs``."""

    nodes: tuple[int, ...] = ()
    pairs: tuple[tuple[int, int], ...] = ()
    bias_mean: float = 0.0
    bias_sigma: float = 0.0
    probability: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(k) for k in self.nodes))
        object.__setattr__(self, "pairs", tuple(tuple(sorted((int(i), int(j))))
                                                for i, j in self.pairs))
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"NLOS probability must be in [0, 1], got {self.probability}")
        if self.bias_sigma < 0:
            raise ConfigError("NLOS bias_sigma must be non-negative")

    def affects(self, i: int, j: int) -> bool:
        return i in self.nodes or j in self.nodes or (min(i, j), max(i, j)) in self.pairs


@dataclass(frozen=True)
class AnomalySpec:
    node: int
    bias: float = 1.5
    mode: str = "constant-bias"

    def __post_init__(self):
        if self.mode not in ("constant-bias", "timing-error"):
            raise ConfigError(f"unknown anomaly mode {self.mode!r}")

    def timing_offset(self, c: float = SPEED_OF_LIGHT) -> float:
        """Extra round-trip time (s) that inflates the range by ``bias``."""
        return 2.0 * self.bias / c


@dataclass(frozen=True)
class SimScenario:
    n_nodes: int = 8
    static_nodes: tuple[int, ...] = (0, 1)
    arena: tuple[float, float] = (8.0, 9.0)
    duration: int = 100
    dt: float = 0.5
    noise_sigma: float = 0.05
    nlos: NlosSpec = field(default_factory=lambda: NlosSpec(
        nodes=(4,), bias_mean=0.1, bias_sigma=0.05, probability=0.3))
    anomaly: AnomalySpec | None = None
    seed: int = 0
    v_max: float = 0.3
    min_separation: float = 0.3
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, "static_nodes", tuple(int(k) for k in self.static_nodes))
        object.__setattr__(self, "arena", tuple(float(v) for v in self.arena))
        if self.n_nodes < 3:
            raise ConfigError(f"need at least 3 nodes, got {self.n_nodes}")
        if any(not 0 <= k < self.n_nodes for k in self.static_nodes):
            raise ConfigError("static node index out of range")
        if self.duration < 1 or self.dt <= 0:
            raise ConfigError("duration must be >= 1 and dt > 0")
        if self.noise_sigma < 0 or self.v_max <= 0 or self.speed_of_light <= 0:
            raise ConfigError("noise_sigma must be >= 0; v_max and speed_of_light > 0")
        if min(self.arena) <= 0:
            raise ConfigError("arena dimensions must be positive")
        if self.anomaly is not None and not 0 <= self.anomaly.node < self.n_nodes:
            raise ConfigError("anomaly node index out of range")

    @property
    def mobile_nodes(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.n_nodes) if k not in self.static_nodes)

    def replace(self, **changes) -> "SimScenario":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class GroundTruthLog:
    timestamps: np.ndarray  # (T,)
    positions: np.ndarray   # (T, n, 2)

    def __len__(self) -> int:
        return len(self.timestamps)


def _occluder_region(scenario: SimScenario, margin: float) -> tuple[float, float, float, float]:
    # far corner, away from the static nodes placed along y = margin
    w, h = scenario.arena
    return (0.5 * w, w - margin, 0.5 * h, h - margin)


def _static_positions(scenario: SimScenario, margin: float) -> np.ndarray:
    w, _ = scenario.arena
    k = len(scenario.static_nodes)
    xs = np.linspace(margin, w - margin, k) if k > 1 else np.array([margin])
    return np.column_stack([xs, np.full(k, margin)])


def generate_truth(scenario: SimScenario) -> GroundTruthLog:
    """Random-waypoint trajectories for the mobile nodes; static nodes never move.

    A mobile node whose next step would come closer than ``min_separation``
    to any other node holds position and picks a new waypoint instead.
    NLOS-designated nodes draw waypoints inside the occluded corner.
    """
    rng = np.random.default_rng([scenario.seed, _TRUTH_STREAM])
    w, h = scenario.arena
    margin = min(0.5, 0.1 * min(w, h))
    n = scenario.n_nodes
    sep = scenario.min_separation
    box = (margin, w - margin, margin, h - margin)
    occluder = _occluder_region(scenario, margin)

    def region(k):
        return occluder if k in scenario.nlos.nodes else box

    def draw(k):
        x0, x1, y0, y1 = region(k)
        return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])

    pos = np.full((n, 2), np.nan)
    pos[list(scenario.static_nodes)] = _static_positions(scenario, margin)
    if len(scenario.static_nodes) > 1 and np.min(np.diff(pos[list(scenario.static_nodes), 0])) < sep:
        raise ArenaTooSmallError("static nodes cannot keep the minimum separation")
    for k in scenario.mobile_nodes:
        for _ in range(1000):
            cand = draw(k)
            others = pos[np.all(np.isfinite(pos), axis=1)]
            if len(others) == 0 or np.min(np.linalg.norm(others - cand, axis=1)) >= sep:
                pos[k] = cand
                break
        else:
            raise ArenaTooSmallError(
                f"could not place node {k} with {sep} m separation in a {w} x {h} m arena")

    waypoints = {k: draw(k) for k in scenario.mobile_nodes}
    speeds = {k: rng.uniform(0.5, 1.0) * scenario.v_max for k in scenario.mobile_nodes}
    frames = [pos.copy()]
    for _ in range(1, scenario.duration):
        for k in scenario.mobile_nodes:
            to_go = waypoints[k] - pos[k]
            dist = float(np.hypot(*to_go))
            step = speeds[k] * scenario.dt
            nxt = waypoints[k] if dist <= step else pos[k] + to_go * (step / dist)
            gap = np.linalg.norm(np.delete(pos, k, axis=0) - nxt, axis=1)
            if np.min(gap) < sep:
                waypoints[k] = draw(k)
                continue
            pos[k] = nxt
            if dist <= step:
                waypoints[k] = draw(k)
                speeds[k] = rng.uniform(0.5, 1.0) * scenario.v_max
        frames.append(pos.copy())
    timestamps = np.arange(scenario.duration) * scenario.dt
    return GroundTruthLog(timestamps, np.stack(frames))


def _range_table(points: np.ndarray, t_index: int, timestamp: float,
                 scenario: SimScenario) -> RangeTable:
    n = len(points)
    pairs = list(combinations(range(n), 2))
    rng = np.random.default_rng([scenario.seed, _RANGE_STREAM, t_index])
    noise = rng.normal(0.0, 1.0, len(pairs)) * scenario.noise_sigma
    nlos_hit = rng.random(len(pairs))
    # NLOS only ever lengthens the path
    nlos_bias = np.abs(scenario.nlos.bias_mean
                       + scenario.nlos.bias_sigma * rng.normal(0.0, 1.0, len(pairs)))
    anomaly = scenario.anomaly
    d = np.zeros((n, n))
    for idx, (i, j) in enumerate(pairs):
        r = float(np.hypot(*(points[i] - points[j]))) + noise[idx]
        if scenario.nlos.affects(i, j) and nlos_hit[idx] < scenario.nlos.probability:
            r += nlos_bias[idx]
        if anomaly is not None and anomaly.node in (i, j):
            if anomaly.mode == "timing-error":
                # a responder-side delay error inflates the round trip by timing_offset
                c = scenario.speed_of_light
                r += tof_distance(TimingPair(anomaly.timing_offset(c), 0.0), c)
            else:
                r += anomaly.bias
        d[i, j] = d[j, i] = max(r, 0.0)
    return RangeTable(d, timestamp)


def generate_ranges(truth: GroundTruthLog, scenario: SimScenario) -> list[RangeTable]:
    """Noisy symmetric range tables, one per ground-truth frame."""
    return [_range_table(p, t, float(ts), scenario)
            for t, (ts, p) in enumerate(zip(truth.timestamps, truth.positions))]


def simulate(scenario: SimScenario) -> tuple[GroundTruthLog, list[RangeTable]]:
    truth = generate_truth(scenario)
    return truth, generate_ranges(truth, scenario)


# -- config and file formats -------------------------------------------------

def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def scenario_from_dict(data: dict) -> SimScenario:
    """Build a scenario from parsed JSON, rejecting unknown keys at every level."""
    if not isinstance(data, dict):
        raise ConfigError("scenario config must be a JSON object")
    data = dict(data)
    if "nlos" in data and data["nlos"] is not None:
        data["nlos"] = _build(NlosSpec, data["nlos"], "nlos")
    elif "nlos" in data:
        data["nlos"] = NlosSpec()
    if data.get("anomaly") is not None:
        data["anomaly"] = _build(AnomalySpec, data["anomaly"], "anomaly")
    try:
        return _build(SimScenario, data, "scenario")
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scenario: {exc}") from exc


def scenario_to_dict(scenario: SimScenario) -> dict:
    out = dataclasses.asdict(scenario)
    out["static_nodes"] = list(scenario.static_nodes)
    out["arena"] = list(scenario.arena)
    out["nlos"]["nodes"] = list(scenario.nlos.nodes)
    out["nlos"]["pairs"] = [list(p) for p in scenario.nlos.pairs]
    return out


def write_truth_csv(truth: GroundTruthLog, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRUTH_HEADER)
        for ts, frame in zip(truth.timestamps, truth.positions):
            for k, (x, y) in enumerate(frame):
                writer.writerow((repr(float(ts)), k, repr(float(x)), repr(float(y))))


def read_truth_csv(path) -> GroundTruthLog:
    frames: dict[float, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0] == TRUTH_HEADER[0]:
                continue
            frames.setdefault(float(rec[0]), {})[int(rec[1])] = (float(rec[2]), float(rec[3]))
    stamps = sorted(frames)
    n = 1 + max(max(f) for f in frames.values())
    pos = np.full((len(stamps), n, 2), np.nan)
    for t, ts in enumerate(stamps):
        for k, xy in frames[ts].items():
            pos[t, k] = xy
    return GroundTruthLog(np.array(stamps), pos)
