"""Figures from an ``evaluate`` output directory.

Run: python demos/plot_report.py out_dir   (needs matplotlib)
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_rmse(out: Path) -> None:
    table = defaultdict(dict)
    for row in read(out / "per_node_rmse.csv"):
        table[row["variant"]][int(row["node"])] = float(row["rmse_m"])
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / len(table)
    for i, (variant, values) in enumerate(sorted(table.items())):
        nodes = sorted(values)
        ax.bar([k + i * width for k in nodes], [values[k] for k in nodes], width, label=variant)
    ax.set_xlabel("node")
    ax.set_ylabel("trajectory RMSE (m)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "per_node_rmse.png", dpi=120)


def plot_confusion(out: Path) -> None:
    rows = read(out / "confusion.csv")
    fig, axes = plt.subplots(1, len(rows), figsize=(4 * len(rows), 3.5), squeeze=False)
    for ax, row in zip(axes[0], rows):
        grid = [[int(row["tp"]), int(row["fn"])], [int(row["fp"]), int(row["tn"])]]
        ax.imshow(grid, cmap="Blues")
        for i in range(2):
            for j in range(2):
                ax.text(j, i, grid[i][j], ha="center", va="center")
        ax.set_xticks([0, 1], ["flagged", "not flagged"])
        ax.set_yticks([0, 1], ["anomalous", "normal"])
        ax.set_title(row["method"])
    fig.tight_layout()
    fig.savefig(out / "confusion.png", dpi=120)


def plot_trajectories(out: Path, variant: str) -> None:
    est, gt = defaultdict(list), defaultdict(list)
    for row in read(out / "trajectories.csv"):
        if row["variant"] == variant:
            est[int(row["node"])].append((float(row["x_m"]), float(row["y_m"])))
    for row in read(out / "truth.csv"):
        gt[int(row["node"])].append((float(row["x_m"]), float(row["y_m"])))
    fig, ax = plt.subplots(figsize=(6, 6))
    for k in sorted(gt):
        line, = ax.plot(*zip(*gt[k]), lw=1)
        if est[k]:
            ax.plot(*zip(*est[k]), ".", ms=3, color=line.get_color())
    ax.set_aspect("equal")
    ax.set_title(f"{variant} (dots) vs ground truth (lines)")
    fig.tight_layout()
    fig.savefig(out / f"trajectories_{variant}.png", dpi=120)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path)
    parser.add_argument("--variant", default="ml")
    args = parser.parse_args()
    plot_rmse(args.out)
    plot_confusion(args.out)
    plot_trajectories(args.out, args.variant)


if __name__ == "__main__":
    main()
