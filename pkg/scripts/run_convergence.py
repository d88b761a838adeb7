"""Train tree credit on the main slot-recall config and print steps-to-0.9 per seed.

    python scripts/run_convergence.py [--config configs/slot_recall.yaml] [--out runs]
"""

import argparse
import sys
import time

from treecredit.cli import THRESHOLD, run_experiment
from treecredit.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/slot_recall.yaml")
    ap.add_argument("--out", default=None, help="output root (default: config run.output_dir)")
    args = ap.parse_args()

    cfg = load_config(args.config)
    t0 = time.perf_counter()
    results = run_experiment(cfg, args.out, log=lambda m: print(m, flush=True))
    print(f"\nseed  final_eval  steps_to_{THRESHOLD}")
    for r in results:
        print(f"{r.seed:4d}  {r.final_eval:10.3f}  {r.steps_to_threshold if r.steps_to_threshold is not None else 'not reached'}")
    reached = sum(r.steps_to_threshold is not None for r in results)
    print(f"{reached}/{len(results)} seeds reached {THRESHOLD} in {time.perf_counter() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
