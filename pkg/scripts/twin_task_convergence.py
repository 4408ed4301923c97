#!/usr/bin/env python3
"""Twin-task sharing convergence experiment.

Two tasks with identical labels (rho=1) on the 4-conv backbone: the
policy search should discover that (nearly) everything can be shared.
Prints the argmax policy and shared fraction per seed.

    python3 scripts/twin_task_convergence.py --seeds 10 20 30 40 50 60
"""

import argparse
import json
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from mtshare.graph import build_graph, infer_shapes
from mtshare.pipeline import (TrainConfig, make_synthetic_tasks, policy_train,
                              pretrain)
from mtshare.prototxt import parse_network
from mtshare.supermodel import TaskSpec, compile_supermodel

FIXTURE = os.path.join(os.path.dirname(__file__), "..", "fixtures", "narrow4.prototxt")


def run_seed(graph, tasks, seed, rho, lambda_reg, pre_iters, policy_iters,
             batch_size=16, task_weight=0.75):
    cfg = TrainConfig(task_weights=[task_weight] * len(tasks),
                      pre_iters=pre_iters, policy_iters=policy_iters,
                      post_iters=0, lambda_reg=lambda_reg, batch_size=batch_size,
                      weight_lr=0.005, seed_weights=seed,
                      seed_gumbel=seed + 1000, seed_dropout=seed + 2000,
                      seed_data=seed + 3000)
    streams = cfg.streams()
    sm = compile_supermodel(graph, tasks, streams)
    data = make_synthetic_tasks(tasks, seed=seed, n_samples=2000,
                                input_shape=(3, 16, 16), rho=rho)
    pretrain(sm, data, cfg, streams)
    sm, state = policy_train(sm, data, cfg, streams)
    return sm, state


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[10, 20, 30, 40, 50, 60])
    ap.add_argument("--rho", type=float, default=1.0)
    ap.add_argument("--lambda-reg", type=float, default=1e-3)
    ap.add_argument("--pre-iters", type=int, default=800)
    ap.add_argument("--policy-iters", type=int, default=2400)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--task-weight", type=float, default=0.75)
    ap.add_argument("--out", default=None, help="write per-seed results JSON")
    args = ap.parse_args()

    with open(FIXTURE) as f:
        graph = infer_shapes(build_graph(parse_network(f.read())))
    tasks = [TaskSpec("a", out_dim=6), TaskSpec("b", out_dim=6)]
    results = []
    for seed in args.seeds:
        t0 = time.perf_counter()
        _, state = run_seed(graph, tasks, seed, args.rho, args.lambda_reg,
                            args.pre_iters, args.policy_iters,
                            batch_size=args.batch_size,
                            task_weight=args.task_weight)
        policy = np.stack([np.argmax(p, axis=1) for p in state.pis()], axis=1)
        frac = float(np.mean(policy == 0))
        dt = time.perf_counter() - t0
        print(f"seed {seed}: policy={policy.tolist()} shared_fraction={frac:.2f} "
              f"({dt:.0f}s)")
        results.append({"seed": seed, "policy": policy.tolist(),
                        "shared_fraction": frac, "seconds": dt})
    frac_pass = sum(r["shared_fraction"] >= 0.7 for r in results)
    print(f"{frac_pass}/{len(results)} seeds reach >= 70% shared")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
