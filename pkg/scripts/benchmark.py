"""Batch time and storage of structured-pruned vs dense networks.

Uses the reference MLP (32 -> 512 -> 512 -> 10, batch 256): scores hidden
nodes with gate curvature, compacts the network at several node ratios and
times one forward+backward pass (median of 30 after 5 warm-up batches).
Timing is serial by design.

    python3 scripts/benchmark.py --ratios 0.5,0.7,0.9
"""

from __future__ import annotations

import argparse

import numpy as np

from earlycrop.data import csr_disk_estimate
from earlycrop.lifecycle import batch_time_ms
from earlycrop.models import mlp
from earlycrop.structured import build_node_mask, compact, gate_scores, induced_weight_sparsity, inject_gates


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--ratios", default="0.5,0.7,0.8,0.9")
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    dense = mlp([32, 512, 512, 10], "relu", seed=args.seed)
    batch = (rng.standard_normal((args.batch, 32)), rng.integers(0, 10, args.batch))
    scores = gate_scores(inject_gates(dense), batch)
    dense_ms = batch_time_ms(dense, batch)

    print("node_ratio\tweight_sparsity\tparams\tbatch_ms\tspeedup\tcsr_bytes\tdense_bytes")
    est = csr_disk_estimate(dense)
    print(f"0.00\t0.0000\t{dense.n_params()}\t{dense_ms:.3f}\t1.00\t{est.csr_bytes}\t{est.dense_bytes}")
    for ratio in (float(r) for r in args.ratios.split(",")):
        small = compact(dense, build_node_mask(scores, ratio))
        ms = batch_time_ms(small, batch)
        est = csr_disk_estimate(small)
        print(f"{ratio:.2f}\t{induced_weight_sparsity(dense, small):.4f}\t{small.n_params()}\t{ms:.3f}\t{dense_ms / ms:.2f}\t{est.csr_bytes}\t{est.dense_bytes}")


if __name__ == "__main__":
    main()
