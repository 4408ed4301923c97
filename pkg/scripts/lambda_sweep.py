#!/usr/bin/env python3
"""Sweep the policy-regularization strength and report derived-model
parameter counts. Stronger regularization should push policies toward
the shared branch and shrink the derived model.

    python3 scripts/lambda_sweep.py --lambdas 1e-4 5e-4 1e-3 1e-2 --seeds 10 20 30
"""

import argparse
import json

import numpy as np

from twin_task_convergence import FIXTURE, run_seed

import os
import sys
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mtshare.graph import build_graph, infer_shapes
from mtshare.policy import sample_policy
from mtshare.prototxt import parse_network
from mtshare.supermodel import TaskSpec, derive_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lambdas", type=float, nargs="+",
                    default=[1e-4, 5e-4, 1e-3, 1e-2])
    ap.add_argument("--seeds", type=int, nargs="+", default=[10, 20, 30])
    ap.add_argument("--pre-iters", type=int, default=800)
    ap.add_argument("--policy-iters", type=int, default=2400)
    ap.add_argument("--sample-seed", type=int, default=10)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    with open(FIXTURE) as f:
        graph = infer_shapes(build_graph(parse_network(f.read())))
    tasks = [TaskSpec("a", out_dim=6), TaskSpec("b", out_dim=6)]
    rows = []
    for lam in args.lambdas:
        counts = []
        for seed in args.seeds:
            sm, state = run_seed(graph, tasks, seed, 1.0, lam,
                                 args.pre_iters, args.policy_iters)
            policy = sample_policy(state, args.sample_seed)
            counts.append(derive_model(sm, policy).param_total())
        mean = float(np.mean(counts))
        print(f"lambda_reg={lam:g}: param counts {counts}, mean {mean:.0f}")
        rows.append({"lambda_reg": lam, "counts": counts, "mean": mean})
    means = [r["mean"] for r in rows]
    inversions = sum(b > a for a, b in zip(means, means[1:]))
    print(f"mean param count inversions along increasing lambda: {inversions}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
