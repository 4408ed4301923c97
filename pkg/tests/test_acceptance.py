"""Acceptance gate: one test per criterion, one printed PASS/FAIL line each.

Criteria 7-9 run real policy searches (marked `slow`); everything else is
fast. Tolerances are stated inline next to each assertion.
"""

import itertools
import math
import time

import numpy as np
import pytest

import mtshare.tensor as T
from mtshare.graph import build_graph, infer_shapes
from mtshare.metrics import (load_metric_table, overall_delta, param_report,
                             relative_performance, round_half_away,
                             sharing_statistics)
from mtshare.pipeline import (TrainConfig, evaluate, make_synthetic_tasks,
                              policy_train, post_train, pretrain, run_pipeline)
from mtshare.policy import (PolicyState, policy_regularization, sample_policy,
                            soft_policy)
from mtshare.prototxt import parse_network
from mtshare.rng import RngStreams
from mtshare.supermodel import (TaskSpec, capacity_bounds, compile_supermodel,
                                compile_timed, derive_model)
from mtshare.tensor import Tensor

from conftest import fixture_path, fixture_text
from test_tensor import numeric_grad

SEEDS_PROTOCOL = (10, 20, 30, 40, 50, 60)


def report(num, name, ok, detail=""):
    line = f"ACCEPTANCE {num:>2} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    print(line)
    assert ok, line


def graph_for(fixture):
    return infer_shapes(build_graph(parse_network(fixture_text(fixture))))


def supermodel_for(fixture, n_tasks=2, seed=0):
    tasks = [TaskSpec(f"t{i}", out_dim=4) for i in range(n_tasks)]
    return compile_supermodel(graph_for(fixture), tasks,
                              RngStreams.from_base_seed(seed))


# -------------------------------------------------------------------------
# 1. Metric-formula reproduction (tolerance: +-0.1 after rounding; < 1 s)
# -------------------------------------------------------------------------

def test_criterion_1_metric_formulas():
    t0 = time.perf_counter()
    tables, extras = load_metric_table(fixture_path("table1.csv"),
                                       fixture_path("table1_directions.json"))
    stl = tables["Single-Task"]
    published = {  # model: (delta seg, delta depth, delta overall)
        "Multi-Task": (4.6, 1.5, 3.1),
        "Cross-Stitch": (5.5, 17.2, 11.4),
        "DEN": (2.3, 11.3, 6.8),
    }
    ok = True
    for model, (seg, depth, overall) in published.items():
        d = relative_performance(tables[model], stl)
        ok &= abs(round_half_away(d["seg"]) - seg) <= 0.1
        ok &= abs(round_half_away(d["depth"]) - depth) <= 0.1
        ok &= abs(round_half_away(overall_delta(d)) - overall) <= 0.1
    stl_p = extras["Single-Task"]["params_abs"]
    rel_mt = param_report(extras["Multi-Task"]["params_abs"], stl_p).relative_percent
    rel_ours = param_report(extras["Searched"]["params_abs"], stl_p).relative_percent
    ok &= abs(round_half_away(rel_mt) - (-50.0)) <= 0.1
    ok &= abs(round_half_away(rel_ours) - (-32.3)) <= 0.1
    dt = time.perf_counter() - t0
    ok &= dt < 1.0
    report(1, "metric-formula reproduction", ok, f"{dt:.2f}s")


# -------------------------------------------------------------------------
# 2. Compiler structural suite (< 2 s compile on the deep fixture)
# -------------------------------------------------------------------------

def test_criterion_2_compiler_structure():
    ok = True
    detail = []
    for fixture in ("tiny4.prototxt", "residual.prototxt", "resnet34ish.prototxt"):
        g = graph_for(fixture)
        tasks = [TaskSpec("a", out_dim=4), TaskSpec("b", out_dim=4)]
        sm, dt = compile_timed(g, tasks, RngStreams.from_base_seed(0))
        ok &= sm.L == g.L_param
        ok &= len(sm.vcns) == len(g.nodes)
        ok &= all(v.node_id == n.id and v.kind == n.kind
                  for v, n in zip(sm.vcns, g.nodes))
        expected = 1
        for v in sm.choice_vcns:
            expected *= v.branches ** sm.N
        ok &= sm.search_space_size() == expected
        if fixture == "resnet34ish.prototxt":
            ok &= dt < 2.0
            detail.append(f"deep fixture compile {dt:.2f}s, L={sm.L}")
    # capacity bounds vs brute force on the small fixture (exhaustive 3^4)
    sm = supermodel_for("tiny4.prototxt")
    lo, hi, _ = capacity_bounds(sm)
    totals = [derive_model(sm, np.array(flat).reshape(2, 4)).param_total()
              for flat in itertools.product(range(3), repeat=8)]
    ok &= min(totals) == lo and max(totals) == hi
    report(2, "compiler structural suite", ok, "; ".join(detail))


# -------------------------------------------------------------------------
# 3. Gradient suite (rel err < 1e-4, >= 5 seeds, < 2 min)
# -------------------------------------------------------------------------

def _rel_err(analytic, numeric):
    denom = np.maximum(np.abs(numeric), 1.0)
    return np.max(np.abs(analytic - numeric) / denom)


def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        # composite forward through conv, pool, bn, linear, losses
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.4, requires_grad=True)
        gma = Tensor(rng.normal(size=(4,)) + 1.0, requires_grad=True)
        beta = Tensor(rng.normal(size=(4,)), requires_grad=True)
        fc = Tensor(rng.normal(size=(3, 4 * 9)) * 0.2, requires_grad=True)
        labels = rng.integers(0, 3, size=2)

        def loss():
            h = T.relu(T.conv2d(x, w, pad=1))
            h = T.maxpool2d(h, 2)
            h = T.batchnorm(h, gma, beta, np.zeros(4), np.ones(4), training=True)
            h = T.linear(h, fc)
            return T.cross_entropy(h, labels) + 0.1 * T.tsum(T.softplus(h))

        params = [x, w, gma, beta, fc]
        for p in params:
            p.zero_grad()
        loss().backward()
        for p in params:
            num = numeric_grad(lambda: loss().data.item(), p.data)
            worst = max(worst, _rel_err(p.grad, num))

        # Eq. 1 soft policy and Eq. 2 regularizer
        lg = Tensor(rng.normal(size=(3,)), requires_grad=True)
        gum = rng.gumbel(size=(3,))
        tgt = rng.normal(size=3)

        def ploss():
            sw = soft_policy(lg, gum, tau=0.7)
            return T.tsum(sw * tgt) + policy_regularization([[sw]])

        lg.zero_grad()
        ploss().backward()
        num = numeric_grad(lambda: ploss().data.item(), lg.data)
        worst = max(worst, _rel_err(lg.grad, num))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 120
    report(3, "gradient finite-difference suite", ok,
           f"worst rel err {worst:.2e}, {dt:.1f}s")


# -------------------------------------------------------------------------
# 4. Gumbel-max frequencies (+-0.01 over 100,000 draws, < 10 s)
# -------------------------------------------------------------------------

def test_criterion_4_gumbel_max_frequencies():
    t0 = time.perf_counter()
    pi = np.array([0.2, 0.3, 0.5])
    n = 100_000
    state = PolicyState([np.log(pi)[None, :]] * n, temperature=1.0)
    draws = sample_policy(state, 77)[0]
    freq = np.bincount(draws, minlength=3) / n
    err = np.max(np.abs(freq - pi))
    dt = time.perf_counter() - t0
    ok = err <= 0.01 and dt < 10
    report(4, "gumbel-max statistical check", ok,
           f"freqs {np.round(freq, 4).tolist()}, max err {err:.4f}, {dt:.1f}s")


# -------------------------------------------------------------------------
# 5. Regularizer closed forms (1e-6) + ordering over 1,000 random triples
# -------------------------------------------------------------------------

def test_criterion_5_regularizer_closed_forms_and_ordering():
    u = np.array([1 / 3, 1 / 3, 1 / 3])
    ok = abs(policy_regularization([[u]]) - 2 * math.log(2)) < 1e-6
    ok &= abs(policy_regularization([[u, u]]) - 3 * math.log(2)) < 1e-6
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p = rng.dirichlet(np.ones(3))
        # mass-to-shared monotonicity: moving half the non-shared mass
        # onto the shared branch strictly lowers the penalty
        q = p.copy()
        moved = (1 - q[0]) / 2
        q = np.array([q[0] + moved, q[1] / 2, q[2] / 2])
        ok &= policy_regularization([[q]]) < policy_regularization([[p]])
        # depth weighting: a non-uniform triple is penalized more when it
        # sits at the bottom (depth 0) than at the top (depth L-1)
        bottom = policy_regularization([[p, u, u]]) - policy_regularization([[u, u, u]])
        top = policy_regularization([[u, u, p]]) - policy_regularization([[u, u, u]])
        delta = policy_regularization([[p]]) - policy_regularization([[u]])
        if abs(delta) > 1e-12:
            ok &= abs(bottom) >= abs(top) - 1e-12
    report(5, "Eq-form closed values and ordering", ok)


# -------------------------------------------------------------------------
# 6. Reuse equivalence (1e-12 over 20 random policies per fixture)
# -------------------------------------------------------------------------

def _naive_forward(sm, model, x):
    outs = {}
    for i, task in enumerate(model.tasks):
        values = {}
        for v in sm.vcns:
            op = model.task_ops[i][v.node_id]
            ins = [values[p] for p in v.parents] or [x]
            arg = ins if v.kind in ("Eltwise", "Concat") else ins[0]
            values[v.node_id] = op(arg, training=False)
        outs[task.name] = sm.heads[i](values[sm.output_node], training=False)
    return outs


def _trace_oracle(sm, policy):
    """Brute-force expected execution counts: replay the structural keys."""
    counters = {v.node_id: 0 for v in sm.vcns}
    seen = set()
    for i in range(sm.N):
        keys = {}
        for v in sm.vcns:
            if hasattr(v, "op"):
                op = v.op
            else:
                c = policy[i][v.depth_index]
                op = (v.shared, v.task_specific[i], v.skips[i] if v.skips else None)[c]
            key = (v.node_id, id(op), tuple(keys[p] for p in v.parents) or ("input",))
            keys[v.node_id] = key
            if key not in seen:
                seen.add(key)
                counters[v.node_id] += 1
    return counters


@pytest.mark.slow
def test_criterion_6_reuse_equivalence():
    rng = np.random.default_rng(1)
    ok = True
    worst = 0.0
    for fixture, n_policies, batch in (("tiny4.prototxt", 20, 4),
                                       ("residual.prototxt", 20, 4),
                                       ("resnet34ish.prototxt", 20, 1)):
        sm = supermodel_for(fixture)
        branch_caps = [v.branches for v in sm.choice_vcns]
        x = Tensor(rng.normal(size=(batch,) + sm.input_shape))
        for _ in range(n_policies):
            pol = np.stack([rng.integers(0, branch_caps)
                            for _ in range(sm.N)])
            model = derive_model(sm, pol)
            outs = model.forward_multitask(x, training=False)
            ref = _naive_forward(sm, model, x)
            for name in outs:
                worst = max(worst, float(np.max(np.abs(outs[name].data - ref[name].data))))
            ok &= model.counters == _trace_oracle(sm, pol)
        # all-shared policy executes each backbone op exactly once
        shared = derive_model(sm, np.zeros((sm.N, sm.L), dtype=int))
        shared.forward_multitask(x, training=False)
        ok &= all(c == 1 for c in shared.counters.values())
    ok &= worst <= 1e-12
    report(6, "computation-reuse equivalence", ok, f"max abs diff {worst:.2e}")


# -------------------------------------------------------------------------
# 7-9. End-to-end searches on synthetic tasks (slow)
#
# Backbone: four 3x3 convs, 4 channels (narrow on purpose -- two unrelated
# 6-way tasks must compete for capacity), 16x16 inputs, 2,000 samples.
# Budget: 800 pre-train + 2,400 policy-train iterations, batch 16
# (~2-4 min per seed on one desktop core). Per-task loss weights rebalance
# the data loss against the pinned regularizer; see lambda_sweep.py notes.
# -------------------------------------------------------------------------

SEARCH_NET = """
layer { name: "data" type: "Input" top: "data"
        input_param { shape { dim: 1 dim: 3 dim: 16 dim: 16 } } }
layer { name: "c1" type: "Convolution" bottom: "data" top: "c1"
        convolution_param { num_output: 4 kernel_size: 3 pad: 1 } }
layer { name: "r1" type: "ReLU" bottom: "c1" top: "r1" }
layer { name: "c2" type: "Convolution" bottom: "r1" top: "c2"
        convolution_param { num_output: 4 kernel_size: 3 pad: 1 } }
layer { name: "r2" type: "ReLU" bottom: "c2" top: "r2" }
layer { name: "c3" type: "Convolution" bottom: "r2" top: "c3"
        convolution_param { num_output: 4 kernel_size: 3 pad: 1 stride: 2 } }
layer { name: "r3" type: "ReLU" bottom: "c3" top: "r3" }
layer { name: "c4" type: "Convolution" bottom: "r3" top: "c4"
        convolution_param { num_output: 4 kernel_size: 3 pad: 1 } }
layer { name: "r4" type: "ReLU" bottom: "c4" top: "r4" }
"""

_SEARCH_CACHE = {}


def _search(seed, rho, lambda_reg, pre_iters=800, policy_iters=2400):
    key = (seed, rho, lambda_reg, pre_iters, policy_iters)
    if key in _SEARCH_CACHE:
        return _SEARCH_CACHE[key]
    g = infer_shapes(build_graph(parse_network(SEARCH_NET)))
    tasks = [TaskSpec("a", out_dim=6), TaskSpec("b", out_dim=6)]
    cfg = TrainConfig(task_weights=[0.75, 0.75], pre_iters=pre_iters, policy_iters=policy_iters,
                      post_iters=0, lambda_reg=lambda_reg, batch_size=16,
                      weight_lr=0.005, seed_weights=seed,
                      seed_gumbel=seed + 1000, seed_dropout=seed + 2000,
                      seed_data=seed + 3000)
    streams = cfg.streams()
    sm = compile_supermodel(g, tasks, streams)
    data = make_synthetic_tasks(tasks, seed=seed, n_samples=2000,
                                input_shape=(3, 16, 16), rho=rho)
    pretrain(sm, data, cfg, streams)
    sm, state = policy_train(sm, data, cfg, streams)
    argmax = np.stack([np.argmax(p, axis=1) for p in state.pis()], axis=1)
    _SEARCH_CACHE[key] = (sm, state, argmax)
    return _SEARCH_CACHE[key]


@pytest.mark.slow
def test_criterion_7_twin_task_sharing_convergence():
    hits = []
    times = []
    for seed in SEEDS_PROTOCOL:
        t0 = time.perf_counter()
        _, _, policy = _search(seed, rho=1.0, lambda_reg=1e-3)
        times.append(time.perf_counter() - t0)
        frac = float(np.mean(policy == 0))
        hits.append(frac >= 0.7)
    ok = sum(hits) >= 4 and max(times) < 300
    report(7, "twin-task sharing convergence", ok,
           f"{sum(hits)}/6 seeds >= 70% shared, slowest {max(times):.0f}s")


@pytest.mark.slow
def test_criterion_8_unrelated_tasks_diverge_at_top():
    hits = []
    for seed in SEEDS_PROTOCOL:
        _, _, policy = _search(seed, rho=0.0, lambda_reg=1e-3)
        s = sharing_statistics(policy)
        hits.append(s["top_half"]["specific_fraction"]
                    > s["bottom_half"]["specific_fraction"])
    ok = sum(hits) >= 4
    report(8, "unrelated tasks diverge at the top", ok, f"{sum(hits)}/6 seeds")


@pytest.mark.slow
def test_criterion_9_lambda_monotonic_param_trend():
    lambdas = (1e-4, 5e-4, 1e-3, 1e-2)
    means = []
    for lam in lambdas:
        counts = []
        for seed in (10, 20, 30):
            sm, state, _ = _search(seed, rho=1.0, lambda_reg=lam)
            # average over the sampling seeds to reduce draw noise
            per_draw = [derive_model(sm, sample_policy(state, s)).param_total()
                        for s in SEEDS_PROTOCOL]
            counts.append(np.mean(per_draw))
        means.append(float(np.mean(counts)))
    inversions = sum(b > a for a, b in zip(means, means[1:]))
    ok = inversions <= 1
    report(9, "lambda_reg monotonic parameter trend", ok,
           f"means {[round(m) for m in means]}, inversions {inversions}")


# -------------------------------------------------------------------------
# 10. Determinism (bit-identical policies and metric logs)
# -------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    results = []
    for run in range(2):
        sm = supermodel_for("tiny4.prototxt", seed=3)
        tasks = sm.tasks
        data = make_synthetic_tasks(tasks, seed=4, n_samples=240,
                                    input_shape=(3, 16, 16), rho=1.0)
        cfg = TrainConfig(pre_iters=4, policy_iters=6, post_iters=4,
                          batch_size=8, checkpoint_every=0)
        run_dir = tmp_path / f"run{run}"
        _, _, discrete, metrics = run_pipeline(sm, data, cfg, run_dir=str(run_dir))
        results.append((discrete, metrics,
                        (run_dir / "metrics.csv").read_text(),
                        (run_dir / "policy.json").read_text()))
    ok = (np.array_equal(results[0][0], results[1][0])
          and results[0][1] == results[1][1]
          and results[0][2] == results[1][2]
          and results[0][3] == results[1][3])
    report(10, "bit-identical reruns", ok)


# -------------------------------------------------------------------------
# 11. Pipeline ablation availability (4 variants from config alone)
# -------------------------------------------------------------------------

def test_criterion_11_ablation_variants():
    ok = True
    rows = {}
    for skip_pre in (False, True):
        for post_mode in ("retrain", "fine-tune"):
            sm = supermodel_for("tiny4.prototxt", seed=0)
            data = make_synthetic_tasks(sm.tasks, seed=4, n_samples=240,
                                        input_shape=(3, 16, 16), rho=1.0)
            cfg = TrainConfig(pre_iters=3, policy_iters=4, post_iters=3,
                              batch_size=8, checkpoint_every=0,
                              skip_pretrain=skip_pre, post_mode=post_mode)
            model, _, _, metrics = run_pipeline(sm, data, cfg)
            key = f"{'nopre' if skip_pre else 'pre'}/{post_mode}"
            rows[key] = metrics
            ok &= set(metrics) == {t.name for t in model.tasks}
            ok &= all(np.isfinite(m["loss"]) for m in metrics.values())
    ok &= len(rows) == 4
    report(11, "pipeline ablation variants", ok, ", ".join(sorted(rows)))
