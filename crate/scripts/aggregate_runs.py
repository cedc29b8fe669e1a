"""Aggregates summary.json files of repeated runs into mean, std and median
per (experiment, trainer), from the final record of each run.

    python3 scripts/aggregate_runs.py runs/*/summary.json
    python3 scripts/aggregate_runs.py runs/*/summary.json --per-step   # curves
"""

import argparse
import json
from pathlib import Path

import pandas as pd

METRICS = ["train_loss", "test_loss", "accuracy", "perplexity", "energy"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("summaries", nargs="+", type=Path)
    ap.add_argument("--per-step", action="store_true", help="aggregate every evaluation step from the sibling metrics.csv")
    ap.add_argument("--out", type=Path, help="also write the table as CSV")
    args = ap.parse_args()

    rows = []
    for path in args.summaries:
        s = json.loads(path.read_text())
        key = {"experiment": s["experiment"], "trainer": s["trainer"], "seed": s["seed"]}
        if args.per_step:
            df = pd.read_csv(path.parent / "metrics.csv")
            for rec in df.to_dict("records"):
                rows.append({**key, "step": rec["step"], **{m: rec.get(m) for m in METRICS}})
        else:
            final = s.get("final") or {}
            rows.append({**key, "wall_clock_s": s.get("wall_clock_s"), **{m: final.get(m) for m in METRICS}})
    df = pd.DataFrame(rows)
    groups = ["experiment", "trainer"] + (["step"] if args.per_step else [])
    cols = [m for m in METRICS + ["wall_clock_s"] if m in df and df[m].notna().any()]
    table = df.groupby(groups)[cols].agg(["mean", "std", "median", "count"])
    with pd.option_context("display.width", 200, "display.max_columns", None):
        print(table)
    if args.out:
        table.to_csv(args.out)


if __name__ == "__main__":
    main()
