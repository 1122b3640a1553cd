"""
End-to-end evaluation: simulate a scenario, localize every timestamp with
layout fusion and/or gradient descent, run the anomaly detector on both,
and score trajectories and detection decisions against ground truth.

Position variants produced per run:

    ml            fused layouts
    ml_pruned     fused layouts after dropping confirmed nodes' layouts
    ml_pruned_gd  descent from ml_pruned with confirmed nodes' ranges masked
    gd            descent from the ml estimate
    gd_pruned     descent from ml with the gd detector's nodes masked
    ml_clean      ml on the anomaly-free twin (same seed, same noise)
    gd_clean      gd on the anomaly-free twin
"""

from __future__ import annotations

import dataclasses
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .anomaly import AnomalyReport, DetectorParams, detect, per_node_error, prune, removal_dispersions
from .errors import ConfigError, CoverageGapError, LocalizationError, PipelineError, TimestampMismatchError
from .fusion import FusionParams, fuse
from .gd import GdParams, gd_configurations, gd_optimize
from .geometry import best_rigid_align
from .layouts import RangeTable, enumerate_layouts, to_common_frame
from .sim import GroundTruthLog, SimScenario, _build, scenario_from_dict, scenario_to_dict, simulate

METHODS = ("ml", "gd", "both")
REPORT_NOTE = ("confusion counts one decision per (timestamp, node); "
               "a decision is positive when the detector confirms that node at that timestamp")


@dataclass(frozen=True)
class PipelineConfig:
    scenario: SimScenario = field(default_factory=SimScenario)
    fusion: FusionParams = field(default_factory=FusionParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    gd: GdParams = field(default_factory=GdParams)
    # (a, b, c) common-frame nodes; derived from the scenario when None
    reference: tuple[int, int, int] | None = None

    @property
    def ref_pair(self) -> tuple[int, int]:
        if self.reference is not None:
            return self.reference[0], self.reference[1]
        static = self.scenario.static_nodes
        return (static[0], static[1]) if len(static) >= 2 else (0, 1)

    @property
    def disambiguator(self) -> int:
        """Lowest-index node outside the reference pair unless set explicitly."""
        if self.reference is not None:
            return self.reference[2]
        return min(k for k in range(self.scenario.n_nodes) if k not in self.ref_pair)

    @property
    def align_nodes(self) -> tuple[int, ...]:
        """Nodes used to register estimates onto ground truth."""
        return tuple(sorted({*self.scenario.static_nodes, *self.ref_pair, self.disambiguator}))

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, scenario=self.scenario.replace(seed=seed))

    def to_dict(self) -> dict:
        def plain(obj):
            return {k: getattr(obj, k) for k in obj.__dataclass_fields__}

        out = scenario_to_dict(self.scenario)
        out["fusion"] = plain(self.fusion)
        out["detector"] = plain(self.detector)
        out["gd"] = plain(self.gd)
        return out


def parse_section(cls, data, name):
    if data is None:
        return cls()
    try:
        return _build(cls, data, name)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(data: Mapping) -> PipelineConfig:
    """Scenario fields at the top level plus optional ``fusion``, ``detector`` and ``gd`` sections."""
    if not isinstance(data, Mapping):
        raise ConfigError("pipeline config must be a JSON object")
    data = dict(data)
    fusion = parse_section(FusionParams, data.pop("fusion", None), "fusion")
    detector = parse_section(DetectorParams, data.pop("detector", None), "detector")
    gd = parse_section(GdParams, data.pop("gd", None), "gd")
    return PipelineConfig(scenario_from_dict(data), fusion, detector, gd)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


# -- scoring -------------------------------------------------------------------

@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @staticmethod
    def _rate(num: int, den: int) -> float:
        return num / den if den else float("nan")

    @property
    def tp_rate(self) -> float:
        return self._rate(self.tp, self.tp + self.fn)

    @property
    def fn_rate(self) -> float:
        return self._rate(self.fn, self.tp + self.fn)

    @property
    def fp_rate(self) -> float:
        return self._rate(self.fp, self.fp + self.tn)

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _anomalous_set(value) -> frozenset:
    if value is None:
        return frozenset()
    if isinstance(value, (int, np.integer)):
        return frozenset([int(value)])
    return frozenset(int(k) for k in value)


def confusion(decisions: Iterable[tuple[float, int, bool]], truth: Mapping,
              n_nodes: int | None = None) -> Confusion:
    """Tally per-(timestamp, node) detector decisions.

    ``truth`` maps each timestamp to its anomalous node (or a set of nodes,
    or None). Every timestamp in ``truth`` must have exactly one decision
    per node; ``n_nodes`` defaults to one past the largest node seen.
    """
    decisions = list(decisions)
    seen: dict[tuple[float, int], bool] = {}
    for ts, node, flagged in decisions:
        key = (float(ts), int(node))
        if key in seen:
            raise CoverageGapError(f"duplicate decision for node {node} at t={ts}")
        seen[key] = bool(flagged)
    if n_nodes is None:
        n_nodes = 1 + max((k for _, k in seen), default=-1)
    stamps = {float(ts) for ts in truth}
    extra = sorted({ts for ts, _ in seen} - stamps)
    if extra:
        raise CoverageGapError(f"decisions for timestamps without ground truth: {extra[:5]}")
    tp = fp = fn = tn = 0
    for ts, bad in truth.items():
        anomalous = _anomalous_set(bad)
        for node in range(n_nodes):
            key = (float(ts), node)
            if key not in seen:
                raise CoverageGapError(f"no decision for node {node} at t={ts}")
            flagged = seen[key]
            if node in anomalous:
                tp, fn = tp + flagged, fn + (not flagged)
            else:
                fp, tn = fp + flagged, tn + (not flagged)
    return Confusion(tp, fp, fn, tn)


def align_to_truth(est: np.ndarray, gt: np.ndarray, align_nodes: Sequence[int]) -> np.ndarray:
    """Register one estimated frame onto ground truth using ``align_nodes``.

    Range-only estimates carry a mirror ambiguity, so both chiralities are
    tried and the one with the smaller alignment residual wins (ties keep the
    estimate unreflected). Rows that cannot be registered stay NaN.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    idx = [k for k in align_nodes
           if np.all(np.isfinite(est[k])) and np.all(np.isfinite(gt[k]))]
    if len(idx) < 2:
        return np.full_like(est, np.nan)
    best, best_res = None, np.inf
    for flip in (1.0, -1.0):
        cand = est * np.array([1.0, flip])
        try:
            T = best_rigid_align(cand[idx], gt[idx])
        except LocalizationError:
            continue
        moved = T.apply(cand)
        res = float(np.sum((moved[idx] - gt[idx]) ** 2))
        if res < best_res - 1e-15:
            best, best_res = moved, res
    return best if best is not None else np.full_like(est, np.nan)


@dataclass(frozen=True)
class TrajectoryError:
    per_node: tuple[float, ...]
    average: float

    def mean_over(self, nodes: Iterable[int]) -> float:
        vals = [self.per_node[k] for k in nodes if np.isfinite(self.per_node[k])]
        return float(np.mean(vals)) if vals else float("nan")


def trajectory_error(est, gt, align_nodes: Sequence[int] | None = (0, 1, 2),
                     timestamps: Sequence[float] | None = None) -> TrajectoryError:
    """Per-node RMSE between estimated and true trajectories.

    ``est`` is ``(T, n, 2)``; ``gt`` a ``GroundTruthLog`` or a matching array.
    Each estimated frame is registered onto ground truth first unless
    ``align_nodes`` is None. Missing (NaN) estimates are skipped; a node never
    estimated gets NaN. ``average`` is the mean of the finite per-node values.
    """
    est = np.asarray(est, dtype=float)
    if isinstance(gt, GroundTruthLog):
        if timestamps is not None and (len(timestamps) != len(gt.timestamps)
                                       or not np.allclose(timestamps, gt.timestamps)):
            raise TimestampMismatchError("estimate timestamps differ from ground truth")
        gt = gt.positions
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape:
        raise TimestampMismatchError(f"estimate shape {est.shape} vs ground truth {gt.shape}")
    if align_nodes is not None:
        est = np.stack([align_to_truth(e, g, align_nodes) for e, g in zip(est, gt)])
    sq = np.sum((est - gt) ** 2, axis=-1)
    ok = np.isfinite(sq)
    count = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = np.sqrt(np.where(ok, sq, 0.0).sum(axis=0) / count)
    rmse[count == 0] = np.nan
    finite = rmse[np.isfinite(rmse)]
    return TrajectoryError(tuple(float(v) for v in rmse),
                           float(finite.mean()) if finite.size else float("nan"))


# -- pipeline ------------------------------------------------------------------

class _Timer:
    def __init__(self):
        self.ms: dict[str, float] = {}

    @contextmanager
    def __call__(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.ms[stage] = self.ms.get(stage, 0.0) + 1e3 * (time.perf_counter() - start)


@dataclass(frozen=True)
class EvalReport:
    """Outcome of one pipeline run.

    ``runtime`` is wall-clock and therefore excluded from ``to_dict`` unless
    asked for, so the serialized report is reproducible byte for byte.
    """

    methods: tuple[str, ...]
    timestamps: tuple[float, ...]
    n_nodes: int
    anomaly_node: int | None
    per_node_rmse: dict = field(hash=False)
    confusion: dict = field(hash=False)
    runtime: dict = field(hash=False, compare=False)
    diagnostics: dict = field(hash=False)
    trajectories: dict = field(hash=False, compare=False, repr=False)
    anomaly_reports: dict = field(hash=False, compare=False, repr=False)
    config: dict = field(hash=False, default_factory=dict)

    @property
    def normal_nodes(self) -> list[int]:
        return [k for k in range(self.n_nodes) if k != self.anomaly_node]

    def mean_rmse(self, variant: str, normal_only: bool = False) -> float:
        vals = np.asarray(self.per_node_rmse[variant], dtype=float)
        if normal_only:
            vals = vals[self.normal_nodes]
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def to_dict(self, include_runtime: bool = False) -> dict:
        def num(v):
            return float(v) if np.isfinite(v) else None

        out = {
            "note": REPORT_NOTE,
            "config": self.config,
            "methods": list(self.methods),
            "n_timestamps": len(self.timestamps),
            "n_nodes": self.n_nodes,
            "anomaly_node": self.anomaly_node,
            "per_node_rmse": {v: [num(x) for x in r] for v, r in self.per_node_rmse.items()},
            "mean_rmse": {v: {"all": num(self.mean_rmse(v)),
                              "normal": num(self.mean_rmse(v, normal_only=True))}
                          for v in self.per_node_rmse},
            "confusion": {m: c.to_dict() for m, c in self.confusion.items()},
            "diagnostics": {k: (num(v) if isinstance(v, float) else v)
                            for k, v in self.diagnostics.items()},
        }
        if include_runtime:
            out["runtime_ms"] = dict(self.runtime)
        return out

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True) + "\n"


def _methods(methods: str) -> tuple[bool, bool]:
    if methods not in METHODS:
        raise ConfigError(f"methods must be one of {METHODS}, got {methods!r}")
    return methods in ("ml", "both"), methods in ("gd", "both")


def localize_ml(table: RangeTable, cfg: PipelineConfig, timer=None):
    """Common-frame layouts and their fusion for one range table."""
    timer = timer or _Timer()
    with timer("layouts"):
        aligned = to_common_frame(enumerate_layouts(table), cfg.ref_pair, cfg.disambiguator)
    with timer("fuse"):
        fused = fuse(aligned, cfg.fusion)
    return aligned, fused


def detect_gd(aligned, table: RangeTable, cfg: PipelineConfig, timestamp: float = 0.0
              ) -> AnomalyReport:
    """The layout detector applied to per-layout gradient-descent solutions."""
    configs = gd_configurations(aligned, table, cfg.gd)
    return detect(configs, fuse(configs, cfg.fusion), cfg.detector, cfg.fusion, timestamp)


def _refit(init, table: RangeTable, masked, cfg: PipelineConfig) -> np.ndarray:
    ranges = table.without_nodes(masked) if masked else table
    return gd_optimize(init, ranges, cfg.gd, cfg.ref_pair, cfg.disambiguator).positions


def _process(table: RangeTable, cfg: PipelineConfig, use_ml: bool, use_gd: bool,
             anomaly: int | None, timer: _Timer) -> dict:
    out: dict = {"positions": {}, "reports": {}}
    pos = out["positions"]
    aligned, fused = localize_ml(table, cfg, timer)
    ts = table.timestamp
    if use_ml:
        pos["ml"] = fused.positions
        with timer("detect"):
            rep = detect(aligned, fused, cfg.detector, cfg.fusion, ts)
        out["reports"]["ml"] = rep
        with timer("prune"):
            pruned = fused.positions
            if rep.confirmed:
                rest = prune(aligned, rep.confirmed, max(2, cfg.detector.min_layouts_remaining))
                pruned = fuse(rest, cfg.fusion, passive=sorted(rep.confirmed)).positions
        pos["ml_pruned"] = pruned
        if anomaly is not None:
            with timer("diagnostics"):
                scores = removal_dispersions(aligned)
                out["dispersion_argmin"] = min(scores, key=lambda k: (scores[k], k))
                out["anomaly_error"] = per_node_error(aligned, fused)[anomaly]
    if use_gd:
        with timer("gd_optimize"):
            pos["gd"] = _refit(fused.positions, table, (), cfg)
        with timer("gd_detect"):
            grep = detect_gd(aligned, table, cfg, ts)
        out["reports"]["gd"] = grep
        with timer("gd_prune"):
            pos["gd_pruned"] = _refit(fused.positions, table, sorted(grep.confirmed), cfg)
        if use_ml:
            with timer("gd_refine_pruned"):
                pos["ml_pruned_gd"] = _refit(pruned, table, sorted(rep.confirmed), cfg)
    return out


def _clean_twin(table: RangeTable, cfg: PipelineConfig, use_gd: bool, timer: _Timer) -> dict:
    with timer("clean_ml"):
        _, fused = localize_ml(table, cfg)
    pos = {"ml_clean": fused.positions}
    if use_gd:
        with timer("gd_clean"):
            pos["gd_clean"] = _refit(fused.positions, table, (), cfg)
    return pos


def run_pipeline(config: PipelineConfig, methods: str = "both") -> EvalReport:
    """Simulate, localize, detect and score every timestamp of ``config.scenario``."""
    use_ml, use_gd = _methods(methods)
    timer = _Timer()
    start = time.perf_counter()
    scen = config.scenario
    anomaly = scen.anomaly.node if scen.anomaly is not None else None
    with timer("simulate"):
        truth, tables = simulate(scen)
        clean_tables = simulate(scen.replace(anomaly=None))[1] if anomaly is not None else None

    frames: list[dict] = []
    for t, table in enumerate(tables):
        try:
            frame = _process(table, config, use_ml, use_gd, anomaly, timer)
            if clean_tables is not None:
                frame["positions"].update(_clean_twin(clean_tables[t], config, use_gd, timer))
        except LocalizationError as exc:
            raise PipelineError(f"t={table.timestamp}: {type(exc).__name__}: {exc}",
                                table.timestamp) from exc
        frames.append(frame)

    with timer("evaluate"):
        report = _assemble(config, methods, truth, frames, anomaly)
    timer.ms["total"] = 1e3 * (time.perf_counter() - start)
    object.__setattr__(report, "runtime", dict(timer.ms))
    return report


def _assemble(config: PipelineConfig, methods: str, truth: GroundTruthLog,
              frames: list[dict], anomaly: int | None) -> EvalReport:
    stamps = tuple(float(t) for t in truth.timestamps)
    n = config.scenario.n_nodes
    variants = list(frames[0]["positions"])
    rmse, trajectories = {}, {}
    for v in variants:
        est = np.stack([f["positions"][v] for f in frames])
        registered = np.stack([align_to_truth(e, g, config.align_nodes)
                               for e, g in zip(est, truth.positions)])
        trajectories[v] = registered
        rmse[v] = trajectory_error(registered, truth, align_nodes=None).per_node
    truth_map = {ts: anomaly for ts in stamps}
    conf, reports = {}, {}
    for m in frames[0]["reports"]:
        reports[m] = tuple(f["reports"][m] for f in frames)
        decisions = [(ts, k, k in r.confirmed) for ts, r in zip(stamps, reports[m])
                     for k in range(n)]
        conf[m] = confusion(decisions, truth_map, n)
    diagnostics: dict = {}
    if anomaly is not None and "dispersion_argmin" in frames[0]:
        hits = [f["dispersion_argmin"] == anomaly for f in frames]
        diagnostics["dispersion_ordering_rate"] = float(np.mean(hits))
        diagnostics["anomaly_node_error_mean"] = float(np.mean([f["anomaly_error"] for f in frames]))
    return EvalReport(
        methods=("ml", "gd") if methods == "both" else (methods,),
        timestamps=stamps,
        n_nodes=n,
        anomaly_node=anomaly,
        per_node_rmse=rmse,
        confusion=conf,
        runtime={},
        diagnostics=diagnostics,
        trajectories=trajectories,
        anomaly_reports=reports,
        config=config.to_dict(),
    )
