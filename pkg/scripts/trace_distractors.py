"""Follow distractor phrases through the dictionary updates of a full-mode run.

Writes one CSV row per (seed, cycle) with the number of distractor and true
phrases held by base categories, then prints the purge rate for instances
created up to cycle 2 and checked after cycle 3.
"""

import argparse
import csv
import sys

from descdet.config import ExperimentConfig
from descdet.sim import trace_distractors


def main():
    parser = argparse.ArgumentParser(description="distractor lifecycle trace")
    parser.add_argument("--config")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--csv", help="write per-cycle counts here (default stdout)")
    args = parser.parse_args()

    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    rows, injected, survived = [], 0, 0
    for seed in args.seeds:
        cfg = ExperimentConfig.from_dict(base.to_dict())
        cfg.world.seed = base.world.seed + seed
        cfg.train.seed = seed
        trace = trace_distractors(cfg)
        injected += len(trace.injected)
        survived += len(trace.survivors)
        rows += [[seed, r["cycle"], r["distractors"], r["true"]] for r in trace.per_cycle]
        for cat, text, cycle in trace.survivors:
            print(f"seed {seed}: {text} (created cycle {cycle}) still in {cat}", file=sys.stderr)

    fh = open(args.csv, "w", newline="") if args.csv else sys.stdout
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["seed", "cycle", "distractors", "true_phrases"])
    writer.writerows(rows)
    if args.csv:
        fh.close()
    print(f"purged {injected - survived}/{injected} ({100 * (1 - survived / injected):.1f}%)", file=sys.stderr)


if __name__ == "__main__":
    main()
