"""Command-line entry point: simulate, localize, detect, evaluate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Mapping

from .anomaly import DetectorParams, detect
from .errors import ConfigError, LocalizationError, PipelineError
from .fusion import FusionParams
from .gd import GdParams, gd_optimize
from .harness import PipelineConfig, parse_section, detect_gd, load_config, localize_ml, run_pipeline
from .layouts import read_ranges_csv, write_ranges_csv
from .sim import generate_truth, simulate, write_truth_csv

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3
POSITIONS_HEADER = ("timestamp_s", "node", "x_m", "y_m")

log = logging.getLogger("redloc")


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v)) if v == v else "nan"


def _write_positions(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSITIONS_HEADER)
        for ts, positions in rows:
            for k, (x, y) in enumerate(positions):
                w.writerow((_fmt(ts), k, _fmt(x), _fmt(y)))


class LocalizeParams:
    """Parsed ``--params`` file for localize and detect."""

    KEYS = {"fusion", "detector", "gd", "ref_pair", "disambiguator"}

    def __init__(self, data: Mapping | None = None):
        data = dict(data or {})
        unknown = sorted(set(data) - self.KEYS)
        if unknown:
            raise ConfigError(f"params: unknown keys {unknown}")
        self.fusion = parse_section(FusionParams, data.get("fusion"), "fusion")
        self.detector = parse_section(DetectorParams, data.get("detector"), "detector")
        self.gd = parse_section(GdParams, data.get("gd"), "gd")
        try:
            a, b = (int(v) for v in data.get("ref_pair", (0, 1)))
            c = int(data.get("disambiguator", 2))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"params: bad reference nodes: {exc}") from exc
        if len({a, b, c}) != 3:
            raise ConfigError("params: ref_pair and disambiguator must be distinct nodes")
        self.ref_pair, self.disambiguator = (a, b), c

    @classmethod
    def load(cls, path) -> "LocalizeParams":
        if path is None:
            return cls()
        try:
            with open(path) as fh:
                return cls(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read params {path}: {exc}") from exc

    def as_pipeline(self) -> PipelineConfig:
        return PipelineConfig(fusion=self.fusion, detector=self.detector, gd=self.gd,
                              reference=(*self.ref_pair, self.disambiguator))


def _load_ranges(path):
    if not Path(path).is_file():
        raise ConfigError(f"ranges file not found: {path}")
    tables = read_ranges_csv(path)
    if not tables:
        raise LocalizationError(f"no range measurements in {path}")
    return tables


def cmd_simulate(args) -> None:
    cfg = _config(args)
    truth, tables = simulate(cfg.scenario)
    out = _outdir(args.out)
    write_ranges_csv(tables, out / "ranges.csv")
    write_truth_csv(truth, out / "truth.csv")
    _write_json(out / "config.json", cfg.to_dict())
    log.info("wrote %d timestamps to %s", len(tables), out)


def cmd_localize(args) -> None:
    params = LocalizeParams.load(args.params)
    cfg = params.as_pipeline()
    tables = _load_ranges(args.ranges)
    out = _outdir(args.out)
    rows, records = [], []
    for table in tables:
        _, fused = _guard(table.timestamp, localize_ml, table, cfg)
        if args.method == "ml":
            rows.append((table.timestamp, fused.positions))
            records.append({"timestamp": table.timestamp, **fused.to_dict()})
        else:
            res = _guard(table.timestamp, gd_optimize, fused.positions, table, cfg.gd,
                         cfg.ref_pair, cfg.disambiguator)
            rows.append((table.timestamp, res.positions))
            records.append({"timestamp": table.timestamp, **res.to_dict()})
    _write_positions(out / "positions.csv", rows)
    _write_json(out / ("fused.json" if args.method == "ml" else "gd_results.json"), records)


def cmd_detect(args) -> None:
    params = LocalizeParams.load(args.params)
    cfg = params.as_pipeline()
    tables = _load_ranges(args.ranges)
    out = _outdir(args.out)
    reports = []
    for table in tables:
        aligned, fused = _guard(table.timestamp, localize_ml, table, cfg)
        if args.method == "ml":
            rep = _guard(table.timestamp, detect, aligned, fused, cfg.detector, cfg.fusion,
                         table.timestamp)
        else:
            rep = _guard(table.timestamp, detect_gd, aligned, table, cfg, table.timestamp)
        reports.append(rep)
    _write_json(out / "anomaly_reports.json", [r.to_dict() for r in reports])
    with open(out / "decisions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("timestamp_s", "node", "flagged"))
        for r in reports:
            for k in range(len(r.per_node_error)):
                w.writerow((_fmt(r.timestamp), k, int(k in r.confirmed)))


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    report = run_pipeline(cfg, args.methods)
    out = _outdir(args.out)
    (out / "report.json").write_text(report.to_json())
    _write_json(out / "anomaly_reports.json",
                {m: [r.to_dict() for r in reps] for m, reps in report.anomaly_reports.items()})
    with open(out / "per_node_rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant", "node", "rmse_m"))
        for variant, values in report.per_node_rmse.items():
            for k, v in enumerate(values):
                w.writerow((variant, k, _fmt(v)))
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "tp", "fp", "fn", "tn"))
        for m, c in report.confusion.items():
            w.writerow((m, c.tp, c.fp, c.fn, c.tn))
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variant",) + POSITIONS_HEADER)
        for variant, traj in report.trajectories.items():
            for ts, frame in zip(report.timestamps, traj):
                for k, (x, y) in enumerate(frame):
                    w.writerow((variant, _fmt(ts), k, _fmt(x), _fmt(y)))
    # wall-clock timings vary run to run, so they stay out of the JSON/CSV outputs
    with open(out / "runtime.log", "w") as fh:
        for stage, ms in sorted(report.runtime.items()):
            fh.write(f"{stage}\t{ms:.3f} ms\n")
    write_truth_csv(generate_truth(cfg.scenario), out / "truth.csv")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _guard(timestamp, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except LocalizationError as exc:
        raise PipelineError(f"t={timestamp}: {type(exc).__name__}: {exc}", timestamp) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="redloc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate ground truth and noisy ranges")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="estimate positions from a ranges CSV")
    p.add_argument("--ranges", required=True)
    p.add_argument("--method", choices=("ml", "gd"), default="ml")
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("detect", help="run the anomaly detector on a ranges CSV")
    p.add_argument("--ranges", required=True)
    p.add_argument("--method", choices=("ml", "gd"), default="ml")
    p.add_argument("--params")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="simulate, localize, detect and score")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", choices=("ml", "gd", "both"), default="both")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LocalizationError, ValueError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
