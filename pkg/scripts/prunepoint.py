"""Final accuracy as a function of when pruning happens.

Prunes at each forced epoch and once at the epoch picked by the detector,
then reports per-epoch median accuracy, the median detector score at prune
time, and their rank correlation.

    python3 scripts/prunepoint.py --rho 0.98 --seeds 0,1,2,3,4
"""

from __future__ import annotations

import argparse
import json

from earlycrop.cli import cmd_prunepoint
from earlycrop.config import load_config


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="key=value template config")
    parser.add_argument("--dataset", default="two_moons")
    parser.add_argument("--mode", default="earlycrop-u", choices=("earlycrop-u", "earlycrop-s"))
    parser.add_argument("--rho", type=float, default=0.98)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--prune-epochs", default="0,1,2,4,8,12,16,20")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--out", default="runs")
    args = parser.parse_args()

    overrides = {"dataset": args.dataset, "mode": args.mode, "rho": args.rho, "epochs": args.epochs, "jobs": args.jobs, "out": args.out, "timing": False}
    template = load_config(args.config, overrides)
    epochs = [int(e) for e in args.prune_epochs.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    _, directory, summary = cmd_prunepoint(template, epochs, seeds)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"results in {directory}")


if __name__ == "__main__":
    main()
