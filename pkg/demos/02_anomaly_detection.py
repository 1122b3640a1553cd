"""A node with a constant range bias, found by per-node error and dispersion.

Run: python demos/02_anomaly_detection.py
"""

import numpy as np

from redloc.anomaly import detect, prune
from redloc.fusion import fuse
from redloc.harness import PipelineConfig, localize_ml
from redloc.layouts import normalize_frame
from redloc.sim import AnomalySpec, SimScenario, simulate

np.set_printoptions(precision=3, suppress=True)
cfg = PipelineConfig()

scen = SimScenario(duration=1, seed=3, noise_sigma=0.05, anomaly=AnomalySpec(node=5, bias=1.5))
truth, (table,) = simulate(scen)
gt = normalize_frame(truth.positions[0])

aligned, fused = localize_ml(table, cfg)
rep = detect(aligned, fused)
print("per-node error:", np.array(rep.per_node_error))
print("candidates:", sorted(rep.candidates), " confirmed:", sorted(rep.confirmed))
print(f"dispersion baseline {rep.sd_bar_baseline:.3f} m; after removing")
for node, sd in sorted(rep.sd_bar_after_removal.items()):
    print(f"  node {node}: {sd:.3f} m")

if rep.confirmed:
    rest = prune(aligned, rep.confirmed)
    refused = fuse(rest, passive=sorted(rep.confirmed))
    normal = [k for k in range(8) if k not in rep.confirmed]
    before = np.linalg.norm(fused.positions - gt, axis=1)[normal].mean()
    after = np.linalg.norm(refused.positions - gt, axis=1)[normal].mean()
    print(f"{len(rest)} layouts left; normal-node error {before:.3f} m -> {after:.3f} m")
