"""Compare reward schemes at an equal step budget (final greedy eval, mean over seeds).

    python scripts/run_ablation.py [--config configs/ablation.yaml] [--schemes tree_credit,final_only,task_specific]
"""

import argparse
import csv
import sys

from treecredit.cli import parse_axis_values, sweep
from treecredit.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/ablation.yaml")
    ap.add_argument("--schemes", default="tree_credit,final_only,task_specific,combined")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    out = sweep(cfg, "scheme", parse_axis_values("scheme", args.schemes), args.out)
    rows = list(csv.DictReader(open(out)))
    ref = next((float(r["final_eval_mean"]) for r in rows if r["value"] == "tree_credit"), None)
    print(f"{'scheme':<14} {'mean':>6} {'std':>6}  margin")
    for r in rows:
        mean = float(r["final_eval_mean"])
        margin = "" if ref is None or r["value"] == "tree_credit" else f"{ref - mean:+.3f}"
        print(f"{r['value']:<14} {mean:6.3f} {float(r['final_eval_std']):6.3f}  {margin}")
    print(f"written {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
