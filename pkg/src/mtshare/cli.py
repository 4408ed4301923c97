"""Command-line entry point.

Subcommand per pipeline stage so ablation variants compose from plain
commands. An experiment config JSON ties a backbone prototxt, task list,
synthetic data settings, and training hyperparameters together:

    {
      "proto": "fixtures/tiny4.prototxt",
      "tasks": [{"name": "a", "kind": "classification", "out_dim": 4,
                 "loss": "cross_entropy", "weight": 1.0}, ...],
      "data": {"n_samples": 2000, "rho": 1.0, "seed": 7},
      "train": { ... TrainConfig fields ... }
    }

All outputs land under the run directory (--run-dir, default under
$MTSHARE_RUN_ROOT or ./runs). Exit codes: 0 success, 1 domain error,
2 usage error.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import graph as G
from . import metrics as M
from . import pipeline as P
from . import policy as PO
from . import prototxt as PT
from . import supermodel as SM
from .errors import MtShareError

DEFAULT_RUN_ROOT = os.environ.get("MTSHARE_RUN_ROOT", "runs")


def _load_spec(path):
    with open(path) as f:
        spec = PT.parse_network(f.read())
    report = PT.validate_spec(spec)
    hard = [f for f in report.findings if not f.warning]
    if hard:
        raise MtShareError("invalid network: " + "; ".join(
            f"{f.code}({f.layer}): {f.detail}" for f in hard))
    return spec


def _load_experiment(path):
    with open(path) as f:
        exp = json.load(f)
    tasks = [SM.TaskSpec(**t) for t in exp["tasks"]]
    cfg = P.TrainConfig.from_dict(exp.get("train", {}))
    return exp, tasks, cfg


def _build(exp, tasks, cfg, input_shape=None):
    spec = _load_spec(exp["proto"])
    graph = G.infer_shapes(G.build_graph(spec), input_shape)
    streams = cfg.streams()
    sm = SM.compile_supermodel(graph, tasks, streams)
    data_cfg = exp.get("data", {})
    data = P.make_synthetic_tasks(
        tasks, data_cfg.get("seed", 7),
        n_samples=data_cfg.get("n_samples", 2000),
        input_shape=tuple(graph.inputs[next(iter(graph.inputs))]),
        rho=data_cfg.get("rho", 1.0))
    return sm, data, streams


class _RunLock:
    def __init__(self, run_dir):
        os.makedirs(run_dir, exist_ok=True)
        self.path = os.path.join(run_dir, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise MtShareError(f"run directory is locked ({self.path})") from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)


def _snapshot_config(run_dir, exp, cfg):
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump({"experiment": exp, "train": cfg.to_dict()}, f, indent=2)


# ---- subcommands ----


def cmd_inspect(args):
    spec = _load_spec(args.proto)
    graph = G.build_graph(spec)
    shape = tuple(int(x) for x in args.input_shape.split(",")) if args.input_shape else None
    graph = G.infer_shapes(graph, shape)
    dump = graph.to_json_dict()
    dump["L_total"] = graph.L_total
    dump["L_param"] = graph.L_param
    dump["total_params"] = graph.total_params()
    print(json.dumps(dump, indent=None if args.json else 2))
    return 0


def cmd_compile(args):
    if args.config:
        exp, tasks, cfg = _load_experiment(args.config)
        exp["proto"] = args.proto or exp["proto"]
    else:
        tasks = [SM.TaskSpec(name=f"task{i}") for i in range(args.tasks)]
        exp = {"proto": args.proto}
        cfg = P.TrainConfig(seed_weights=args.seed)
    sm, _, _ = _build(exp, tasks, cfg)
    size = sm.search_space_size()
    lo, hi, shared = SM.capacity_bounds(sm)
    summary = sm.export_summary()
    summary["capacity_bounds"] = {"min": lo, "max": hi, "all_shared": shared}
    summary["search_space_log3"] = math.log(size, 3) if size > 1 else 0.0
    if args.run_dir:
        os.makedirs(args.run_dir, exist_ok=True)
        with open(os.path.join(args.run_dir, "supermodel.json"), "w") as f:
            json.dump(summary, f, indent=2)
    if args.json:
        print(json.dumps(summary))
    else:
        print(f"tasks N={sm.N}  choice nodes L={sm.L}  (total nodes {len(sm.vcns)})")
        exact = str(size) if size < 10 ** 40 else "(large)"
        print(f"search space size: 3^(N*L)-equivalent = {exact}  "
              f"(log3 = {summary['search_space_log3']:.1f})")
        print(f"backbone capacity C = {sm.backbone_capacity} params")
        print(f"capacity bounds: min {lo}, all-shared {shared}, max {hi}")
    return 0


def _stage_common(args):
    exp, tasks, cfg = _load_experiment(args.config)
    if args.seed is not None:
        cfg.seed_weights = args.seed
        cfg.seed_gumbel = args.seed + 1000
        cfg.seed_dropout = args.seed + 2000
        cfg.seed_data = args.seed + 3000
    if args.profile:
        cfg.profile = args.profile
        cfg.__post_init__()
    run_dir = args.run_dir or os.path.join(DEFAULT_RUN_ROOT, "run")
    os.makedirs(run_dir, exist_ok=True)
    return exp, tasks, cfg, run_dir


def cmd_pretrain(args):
    exp, tasks, cfg, run_dir = _stage_common(args)
    with _RunLock(run_dir):
        _snapshot_config(run_dir, exp, cfg)
        sm, data, streams = _build(exp, tasks, cfg)
        log = P.MetricsLog(os.path.join(run_dir, "metrics_pretrain.csv"))
        P.pretrain(sm, data, cfg, streams, log, run_dir)
        log.close()
        P.save_checkpoint(os.path.join(run_dir, "pretrained.npz"), sm, {}, streams)
    print(f"pretrained {cfg.pre_iters} iters -> {run_dir}/pretrained.npz")
    return 0


def cmd_search(args):
    exp, tasks, cfg, run_dir = _stage_common(args)
    with _RunLock(run_dir):
        _snapshot_config(run_dir, exp, cfg)
        sm, data, streams = _build(exp, tasks, cfg)
        ckpt = os.path.join(run_dir, "pretrained.npz")
        if os.path.exists(ckpt):
            P.load_checkpoint(ckpt, sm, {}, streams)
        elif not cfg.skip_pretrain:
            P.pretrain(sm, data, cfg, streams, None, None)
        log = P.MetricsLog(os.path.join(run_dir, "metrics_policy.csv"))
        sm, state = P.policy_train(sm, data, cfg, streams, log, run_dir)
        log.close()
        P.save_checkpoint(os.path.join(run_dir, "searched.npz"), sm, {}, streams)
        with open(os.path.join(run_dir, "policy_state.json"), "w") as f:
            json.dump({"logits": [lg.tolist() for lg in state.logits],
                       "temperature": state.temperature}, f, indent=2)
    print(f"policy-trained {cfg.policy_iters} iters -> {run_dir}/policy_state.json")
    return 0


def _load_state(run_dir):
    with open(os.path.join(run_dir, "policy_state.json")) as f:
        raw = json.load(f)
    return PO.PolicyState([np.array(lg) for lg in raw["logits"]], raw["temperature"])


def cmd_sample(args):
    run_dir = args.run_dir or os.path.join(DEFAULT_RUN_ROOT, "run")
    state = _load_state(run_dir)
    os.makedirs(os.path.join(run_dir, "policies"), exist_ok=True)
    for seed in args.seeds:
        pol = PO.sample_policy(state, seed)
        out = os.path.join(run_dir, "policies", f"policy_seed{seed}.json")
        with open(out, "w") as f:
            json.dump({"seed": seed, "policy": pol.tolist()}, f, indent=2)
        print(out)
    return 0


def cmd_posttrain(args):
    exp, tasks, cfg, run_dir = _stage_common(args)
    with _RunLock(run_dir):
        sm, data, streams = _build(exp, tasks, cfg)
        P.load_checkpoint(os.path.join(run_dir, "searched.npz"), sm, {}, streams)
        with open(args.policy) as f:
            pol = np.array(json.load(f)["policy"])
        log = P.MetricsLog(os.path.join(run_dir, "metrics_post.csv"))
        model = P.post_train(sm, pol, data, cfg, streams, log, run_dir)
        log.close()
        result = {"params": model.param_total(),
                  "breakdown": model.param_breakdown(),
                  "eval": P.evaluate(model, data)}
        with open(os.path.join(run_dir, "posttrain.json"), "w") as f:
            json.dump(result, f, indent=2)
    print(json.dumps(result) if args.json else
          f"post-trained ({cfg.post_mode}); params={result['params']} -> {run_dir}/posttrain.json")
    return 0


def cmd_eval(args):
    tables, extras = M.load_metric_table(args.table1, args.directions)
    stl = tables.pop(args.baseline)
    stl_params = extras.get(args.baseline, {}).get("params_abs")
    rows = []
    for model, mset in tables.items():
        deltas = M.relative_performance(mset, stl)
        overall = M.overall_delta(deltas)
        row = {"model": model}
        for task, d in deltas.items():
            row[f"delta_{task}"] = float(M.round_half_away(d))
        row["delta_overall"] = float(M.round_half_away(overall))
        abs_params = extras.get(model, {}).get("params_abs")
        if abs_params is not None and stl_params:
            rel = M.param_report(abs_params, stl_params).relative_percent
            row["params_rel_percent"] = float(M.round_half_away(rel))
        rows.append(row)
    if args.json:
        print(json.dumps(rows))
    else:
        for row in rows:
            print("  ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_report(args):
    run_dir = args.run_dir or os.path.join(DEFAULT_RUN_ROOT, "run")
    report = {}
    pol_path = args.policy or os.path.join(run_dir, "policy.json")
    if os.path.exists(pol_path):
        with open(pol_path) as f:
            pol = np.array(json.load(f)["policy"])
        report["sharing"] = M.sharing_statistics(pol)
    post_path = os.path.join(run_dir, "posttrain.json")
    if os.path.exists(post_path):
        with open(post_path) as f:
            report["posttrain"] = json.load(f)
    print(json.dumps(report, indent=None if args.json else 2))
    return 0


def cmd_viz_export(args):
    run_dir = args.run_dir or os.path.join(DEFAULT_RUN_ROOT, "run")
    state = _load_state(run_dir)
    discrete = None
    if args.policy:
        with open(args.policy) as f:
            discrete = np.array(json.load(f)["policy"])
    viz = M.export_policy_viz(state, discrete=discrete)
    out = args.out or os.path.join(run_dir, "policy_viz.json")
    with open(out, "w") as f:
        json.dump(viz, f, indent=2)
    print(out)
    if args.svg:
        svg_path = os.path.splitext(out)[0] + ".svg"
        with open(svg_path, "w") as f:
            f.write(M.policy_viz_svg(viz))
        print(svg_path)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="mtshare",
                                     description="multi-task supermodel compiler and policy search")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--run-dir", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--profile", choices=["desk", "paper"], default=None)
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("inspect", help="dump the operator graph")
    p.add_argument("--proto", required=True)
    p.add_argument("--input-shape", default=None, help="C,H,W override")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("compile", help="compile a supermodel and print its summary")
    p.add_argument("--proto", default=None)
    p.add_argument("--tasks", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    common_group = p.add_argument_group()
    common_group.add_argument("--config", default=None)
    common_group.add_argument("--run-dir", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_compile)

    for name, fn in (("pretrain", cmd_pretrain), ("search", cmd_search)):
        p = sub.add_parser(name)
        common(p, config_required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("sample", help="sample discrete policies from the searched state")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--seeds", type=int, nargs="+", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("posttrain")
    common(p, config_required=True)
    p.add_argument("--policy", required=True, help="sampled policy JSON")
    p.set_defaults(fn=cmd_posttrain)

    p = sub.add_parser("eval", help="relative-performance table from absolute metrics")
    p.add_argument("--table1", required=True)
    p.add_argument("--directions", default=None)
    p.add_argument("--baseline", default="Single-Task")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("viz-export")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(fn=cmd_viz_export)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    if getattr(args, "command", None) == "eval" and args.directions is None:
        args.directions = os.path.join(os.path.dirname(args.table1), "table1_directions.json")
    try:
        return args.fn(args)
    except (MtShareError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
