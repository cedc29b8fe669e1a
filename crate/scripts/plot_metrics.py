"""Plots one or more metrics.csv files written by `gpc run`.

    python3 scripts/plot_metrics.py runs/a/metrics.csv runs/b/metrics.csv \
        --column accuracy --out accuracy.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv", nargs="+", type=Path)
    ap.add_argument("--column", default="test_loss", help="metric to plot (default test_loss)")
    ap.add_argument("--x", default="step", choices=["step", "epoch"])
    ap.add_argument("--log", action="store_true", help="log-scale y axis")
    ap.add_argument("--out", type=Path, default=Path("metrics.png"))
    args = ap.parse_args()

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.csv:
        df = pd.read_csv(path)
        if args.column not in df or df[args.column].isna().all():
            print(f"{path}: no {args.column} values, skipped")
            continue
        ax.plot(df[args.x], df[args.column], marker="o", ms=3, label=path.parent.name or str(path))
    ax.set_xlabel(args.x)
    ax.set_ylabel(args.column)
    if args.log:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(args.out)


if __name__ == "__main__":
    main()
