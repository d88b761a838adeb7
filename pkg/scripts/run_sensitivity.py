"""Sweep K, J and G around the (8, 2, 2) tree at a fixed step budget.

    python scripts/run_sensitivity.py [--config configs/sensitivity.yaml] [--axes K,J,G]

Each axis writes its own ``<name>__sweep_<axis>.csv``; the shared centre cell
is rerun per axis, which keeps every CSV self-contained.
"""

import argparse
import csv
import sys

import numpy as np

from treecredit.cli import sweep
from treecredit.config import load_config

VALUES = {"K": [1, 2, 4], "J": [1, 2, 4], "G": [2, 4, 8]}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/sensitivity.yaml")
    ap.add_argument("--axes", default="K,J,G")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    for axis in args.axes.split(","):
        out = sweep(cfg, axis, VALUES[axis], args.out, log=None)
        rows = list(csv.DictReader(open(out)))
        finals = [np.array([float(x) for x in r["finals"].split()]) for r in rows]
        print(f"axis {axis}")
        for r, f, prev in zip(rows, finals, [None] + finals[:-1]):
            note = ""
            if prev is not None:
                pooled = np.sqrt((prev.var(ddof=1) + f.var(ddof=1)) / 2)
                note = "ok" if f.mean() >= prev.mean() - pooled else f"drop beyond pooled std {pooled:.3f}"
            print(f"  {axis}={r['value']:>2}  mean {f.mean():.3f}  std {f.std(ddof=1):.3f}  {note}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
