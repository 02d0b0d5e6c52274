"""Run the five-mode ablation over the configured seeds and print the summary table.

    python3 scripts/run_ablation.py --out runs/ablation --jobs 4
"""

import argparse
import sys

from descdet.cli import main


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--jobs", type=int, default=1)
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    argv = ["-v", "ablate", "--out", args.out, "--jobs", str(args.jobs)]
    if args.config:
        argv += ["--config", args.config]
    sys.exit(main(argv))
