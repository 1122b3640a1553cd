import json

import numpy as np
import pytest

import redloc.harness as harness
from redloc.errors import (
    ConfigError,
    CoverageGapError,
    PipelineError,
    TimestampMismatchError,
    TooFewLayoutsError,
)
from redloc.geometry import RigidTransform2
from redloc.harness import (
    Confusion,
    PipelineConfig,
    align_to_truth,
    config_from_dict,
    confusion,
    load_config,
    run_pipeline,
    trajectory_error,
)
from redloc.sim import AnomalySpec, NlosSpec, SimScenario, generate_truth

GD_STAGES = {"gd_optimize", "gd_detect", "gd_prune", "gd_refine_pruned", "gd_clean"}


# -- confusion ---------------------------------------------------------------------

def perfect_decisions(n_ts=10, n=8, bad=3):
    return [(float(t), k, k == bad) for t in range(n_ts) for k in range(n)]


def test_confusion_all_correct():
    c = confusion(perfect_decisions(), {float(t): 3 for t in range(10)})
    assert c == Confusion(tp=10, fp=0, fn=0, tn=70)
    assert c.total == 80 and c.tp_rate == 1.0 and c.fp_rate == 0.0


def test_confusion_inverted_swaps():
    truth = {float(t): 3 for t in range(10)}
    inverted = [(t, k, not f) for t, k, f in perfect_decisions()]
    c = confusion(inverted, truth)
    assert c == Confusion(tp=0, fp=70, fn=10, tn=0)


def test_confusion_hand_count():
    decisions = [
        (0.0, 0, True),   # TP
        (0.0, 1, True),   # FP
        (0.0, 2, False),  # TN
        (1.0, 0, False),  # TN (no anomaly at t=1)
        (1.0, 1, True),   # FP
        (1.0, 2, False),  # TN
    ]
    assert confusion(decisions, {0.0: 0, 1.0: None}) == Confusion(tp=1, fp=2, fn=0, tn=3)


def test_confusion_multiple_anomalies_and_sum():
    c = confusion([(0.0, 0, False), (0.0, 1, True)], {0.0: {0, 1}})
    assert c == Confusion(tp=1, fn=1)
    assert c + Confusion(tn=4) == Confusion(tp=1, fn=1, tn=4)


@pytest.mark.parametrize("decisions", [
    [(0.0, 0, True)],                                     # node 1 missing
    [(0.0, 0, True), (0.0, 1, False), (0.0, 1, False)],   # duplicate
    [(0.0, 0, True), (0.0, 1, False), (5.0, 0, False)],   # unknown timestamp
])
def test_confusion_coverage_gap(decisions):
    with pytest.raises(CoverageGapError):
        confusion(decisions, {0.0: 0}, n_nodes=2)


def test_rates_undefined_without_positives():
    assert np.isnan(Confusion(tn=5).tp_rate)


# -- trajectory error ---------------------------------------------------------------

def test_trajectory_error_zero():
    truth = generate_truth(SimScenario(duration=6))
    err = trajectory_error(truth.positions, truth)
    assert max(err.per_node) < 1e-12 and err.average < 1e-12


def test_trajectory_error_three_four_five():
    truth = generate_truth(SimScenario(duration=6))
    est = truth.positions.copy()
    est[:, 6] += (0.3, 0.4)
    err = trajectory_error(est, truth)
    assert err.per_node[6] == pytest.approx(0.5, abs=1e-12)
    assert max(np.delete(err.per_node, 6)) < 1e-12


def test_trajectory_error_matches_direct_sum():
    truth = generate_truth(SimScenario(duration=12, seed=1))
    rng = np.random.default_rng(1)
    est = truth.positions + rng.normal(0, 0.2, truth.positions.shape)
    err = trajectory_error(est, truth, align_nodes=None)
    for k in range(8):
        total = 0.0
        for t in range(12):
            dx, dy = est[t, k] - truth.positions[t, k]
            total += dx * dx + dy * dy
        assert err.per_node[k] == pytest.approx(np.sqrt(total / 12), rel=1e-12)
    assert err.average == pytest.approx(np.mean(err.per_node), rel=1e-12)


def test_trajectory_error_frame_fix():
    truth = generate_truth(SimScenario(duration=4, seed=2))
    moved = np.stack([RigidTransform2(2.0, -1.0, 0.6).apply(f * [1, -1]) for f in truth.positions])
    assert max(trajectory_error(moved, truth).per_node) < 1e-9


def test_trajectory_error_skips_missing():
    truth = generate_truth(SimScenario(duration=4))
    est = truth.positions.copy()
    est[1, 5] = np.nan
    est[:, 7] = np.nan
    err = trajectory_error(est, truth)
    assert err.per_node[5] < 1e-12 and np.isnan(err.per_node[7])
    assert np.isfinite(err.average)


def test_trajectory_error_mismatch():
    truth = generate_truth(SimScenario(duration=4))
    with pytest.raises(TimestampMismatchError):
        trajectory_error(truth.positions[:3], truth)
    with pytest.raises(TimestampMismatchError):
        trajectory_error(truth.positions, truth, timestamps=[0.0, 1.0, 2.0, 3.0])


def test_align_to_truth_needs_two_nodes():
    gt = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    est = gt.copy()
    est[1] = np.nan
    assert np.all(np.isnan(align_to_truth(est, gt, (0, 1))))


# -- pipeline --------------------------------------------------------------------------

def small(duration=6, seed=0, **kw):
    return PipelineConfig(SimScenario(duration=duration, seed=seed, **kw))


def test_exact_pipeline():
    rep = run_pipeline(small(duration=8, noise_sigma=0.0, nlos=NlosSpec()))
    for variant, rmse in rep.per_node_rmse.items():
        assert max(rmse) < 1e-6, variant
    for c in rep.confusion.values():
        assert c == Confusion(tn=64)


def test_ml_detects_more_than_gd():
    ml, gd = Confusion(), Confusion()
    for seed in range(4):
        rep = run_pipeline(small(duration=10, seed=seed, anomaly=AnomalySpec(node=5, bias=1.5)))
        ml, gd = ml + rep.confusion["ml"], gd + rep.confusion["gd"]
    assert ml.tp_rate > gd.tp_rate
    assert ml.total == gd.total == 4 * 10 * 8


def test_pipeline_deterministic():
    cfg = small(seed=3, anomaly=AnomalySpec(node=5, bias=1.5))
    a, b = run_pipeline(cfg), run_pipeline(cfg)
    assert a == b
    assert a.to_json() == b.to_json()


def test_report_contents():
    rep = run_pipeline(small(seed=1, anomaly=AnomalySpec(node=5, bias=1.5)))
    assert set(rep.per_node_rmse) == {"ml", "ml_pruned", "ml_pruned_gd", "gd", "gd_pruned",
                                      "ml_clean", "gd_clean"}
    assert all(v >= 0 for r in rep.per_node_rmse.values() for v in r)
    assert rep.normal_nodes == [0, 1, 2, 3, 4, 6, 7]
    data = json.loads(rep.to_json())
    assert "runtime_ms" not in data and "note" in data
    assert data["confusion"]["ml"]["tp"] + data["confusion"]["ml"]["fn"] == 6
    assert 0 <= data["diagnostics"]["dispersion_ordering_rate"] <= 1


def test_runtime_accounting():
    rep = run_pipeline(small(duration=10, anomaly=AnomalySpec(node=5, bias=1.5)))
    stages = {k: v for k, v in rep.runtime.items() if k != "total"}
    assert all(v >= 0 for v in stages.values())
    assert abs(sum(stages.values()) - rep.runtime["total"]) <= 0.1 * rep.runtime["total"]


def test_ml_only_never_runs_gd():
    rep = run_pipeline(small(anomaly=AnomalySpec(node=5, bias=1.5)), methods="ml")
    assert not GD_STAGES & set(rep.runtime)
    assert set(rep.confusion) == {"ml"} and "gd" not in rep.per_node_rmse


def test_gd_only():
    rep = run_pipeline(small(), methods="gd")
    assert set(rep.confusion) == {"gd"} and "ml" not in rep.per_node_rmse


def test_bad_methods():
    with pytest.raises(ConfigError):
        run_pipeline(small(), methods="all")


def test_pipeline_error_carries_timestamp(monkeypatch):
    real = harness.fuse
    calls = []

    def flaky(aligned, *args, **kwargs):
        calls.append(1)
        if len(calls) > 3:
            raise TooFewLayoutsError("forced")
        return real(aligned, *args, **kwargs)

    monkeypatch.setattr(harness, "fuse", flaky)
    with pytest.raises(PipelineError) as info:
        run_pipeline(small(), methods="ml")
    assert info.value.timestamp > 0.0
    assert "TooFewLayoutsError" in str(info.value)


# -- config ------------------------------------------------------------------------------

def test_config_loader(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"duration": 4, "seed": 2, "fusion": {"q": 0.75},
                                "gd": {"step": 0.1}, "anomaly": {"node": 5, "bias": 1.0}}))
    cfg = load_config(path)
    assert cfg.scenario.duration == 4 and cfg.fusion.q == 0.75 and cfg.gd.step == 0.1
    assert cfg.scenario.anomaly == AnomalySpec(node=5, bias=1.0)
    assert cfg.with_seed(9).scenario.seed == 9
    assert config_from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("data", [
    {"fusion": {"q": 2.0}},
    {"detector": {"mode": "x"}},
    {"gd": {"step": -1}},
    {"unknown": True},
    "not an object",
])
def test_config_rejects_bad_input(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_config_unreadable(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
