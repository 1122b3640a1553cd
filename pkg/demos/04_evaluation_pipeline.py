"""Full pipeline on one seeded scenario, writing the CSVs the plot script reads.

Run: python demos/04_evaluation_pipeline.py [out_dir]
then: python demos/plot_report.py out_dir
"""

import json
import pathlib
import sys

from redloc.cli import main

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out"
config = f"{out}/scenario.json"

pathlib.Path(out).mkdir(exist_ok=True)
pathlib.Path(config).write_text(json.dumps({
    "duration": 40, "seed": 1, "noise_sigma": 0.05,
    "anomaly": {"node": 5, "bias": 1.5},
}))
code = main(["evaluate", "--config", config, "--methods", "both", "--out", out])
report = json.loads(pathlib.Path(out, "report.json").read_text())
for variant, r in sorted(report["mean_rmse"].items()):
    print(f"{variant:13s} all {r['all']:.3f} m  normal {r['normal']:.3f} m")
for method, c in report["confusion"].items():
    print(f"{method}: {c}")
print(pathlib.Path(out, "runtime.log").read_text())
sys.exit(code)
