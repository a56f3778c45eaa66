#!/usr/bin/env python3
"""Run the mode ablation on the synthetic corpus and print a summary table.

Usage: python scripts/run_ablation.py [--seeds 1993,1994,1995] [--increment 4]
"""

import argparse
import os
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("OTCIL_THREADS", "1"))
os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("OTCIL_THREADS", "1"))

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from otcil.ablation import DEFAULT_MODES, run_ablation  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1993,1994,1995")
    ap.add_argument("--increment", type=int, default=4)
    ap.add_argument("--no-replay-baseline", action="store_true", default=True)
    args = ap.parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))

    t0 = time.time()
    result = run_ablation(seeds=seeds, increment=args.increment)
    elapsed = time.time() - t0

    print(f"{'mode':14s} " + " ".join(f"seed{s:>5}" for s in seeds) +
          "   mean_last  mean_forget")
    for mode in DEFAULT_MODES:
        lasts = [result.per_seed[s].reports[mode].last_accuracy for s in seeds]
        forgets = [result.per_seed[s].reports[mode].forgetting for s in seeds]
        f_mean = sum(forgets) / len(forgets) if all(f is not None for f in forgets) else None
        f_txt = "n/a" if f_mean is None else f"{f_mean:10.2f}"
        print(f"{mode:14s} " + " ".join(f"{v:9.2f}" for v in lasts) +
              f"   {result.mean_last_accuracy(mode):9.2f} {f_txt}")
    nr = result.mean_no_replay_forgetting()
    print(f"{'no_replay(gl)':14s} " +
          " ".join(f"{result.per_seed[s].no_replay_global.forgetting:9.2f}" for s in seeds) +
          f"   {'':9s} {nr:10.2f}")
    print(f"elapsed: {elapsed:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
