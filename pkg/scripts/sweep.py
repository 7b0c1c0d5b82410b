"""Sparsity-vs-accuracy sweep on two-moons across pruning modes.

Writes a sweep directory (metrics.csv with per-run and median rows, one run
directory per configuration, plotdata/sparsity_accuracy.tsv) and prints the
comparison table.

    python3 scripts/sweep.py --seeds 0,1,2 --out runs
"""

from __future__ import annotations

import argparse

from earlycrop.cli import cmd_report, cmd_sweep
from earlycrop.config import load_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="key=value template config")
    parser.add_argument("--rhos", default="0.5,0.8,0.9,0.95,0.98")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--modes", default="crop-u,cropit-u,earlycrop-u")
    parser.add_argument("--criterion", default="crop")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="runs")
    args = parser.parse_args()

    template = load_config(args.config, {"criterion": args.criterion, "epochs": args.epochs, "jobs": args.jobs, "out": args.out, "timing": False})
    rhos = [float(r) for r in args.rhos.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    _, directory, _ = cmd_sweep(template, rhos, seeds, args.modes.split(","))
    _, text, _ = cmd_report(directory, directory)
    print(text, end="")
    print(f"results in {directory}")


if __name__ == "__main__":
    main()
