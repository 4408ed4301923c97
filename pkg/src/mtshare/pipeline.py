"""Three-stage training pipeline: pre-train (branch-averaged warmup),
policy-train (alternating weight/logit optimization with Gumbel-Softmax
routing), post-train (train the derived model with the policy frozen).
Plus synthetic multi-task data and checkpointing.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import Divergence
from .optim import SGD, Adam, StepDecay
from .policy import (PolicyState, policy_regularization, sample_policy,
                     soft_policy, temperature_schedule, total_loss)
from .rng import RngStreams
from .supermodel import TaskSpec, derive_model

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    pre_iters: int = 500
    policy_iters: int = 1000
    post_iters: int = 1500
    weight_lr: float = 0.001
    policy_lr: float = 0.01
    weight_momentum: float = 0.9
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 4000
    task_weights: list = None          # default: 1.0 per task
    lambda_reg: float = 0.0005
    batch_size: int = 16
    tau_start: float = 5.0
    tau_end: float = 0.5
    alternation_period: int = 1
    seed_weights: int = 0
    seed_gumbel: int = 1
    seed_dropout: int = 2
    seed_data: int = 3
    post_mode: str = "retrain"         # retrain | fine-tune
    skip_pretrain: bool = False
    hard_sampling: bool = False        # straight-through instead of soft routing
    checkpoint_every: int = 500
    val_every: int = 100
    profile: str = "desk"

    def __post_init__(self):
        if min(self.pre_iters, self.policy_iters, self.post_iters) < 0:
            raise ValueError("iteration budgets must be >= 0")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.alternation_period < 1:
            raise ValueError("alternation period must be >= 1")
        if self.profile == "paper":
            # Full-scale budgets; desk hardware is not expected to run these.
            self.pre_iters, self.policy_iters, self.post_iters = 10000, 20000, 30000

    def streams(self):
        return RngStreams(weights=self.seed_weights, gumbel=self.seed_gumbel,
                          dropout=self.seed_dropout, data=self.seed_data)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


# ---- synthetic multi-task data ----


@dataclass
class SyntheticTaskSet:
    tasks: list
    inputs: np.ndarray                  # (n, C, H, W)
    labels: dict                        # task name -> (n,) ints or (n, D) floats
    train_idx: np.ndarray
    val_idx: np.ndarray
    rho: float

    def batches(self, rng, batch_size, indices=None, iters=None):
        idx = self.train_idx if indices is None else indices
        produced = 0
        while iters is None or produced < iters:
            order = rng.permutation(idx)
            for start in range(0, len(order) - batch_size + 1, batch_size):
                take = order[start:start + batch_size]
                yield take
                produced += 1
                if iters is not None and produced >= iters:
                    return

    def batch_arrays(self, take):
        x = T.Tensor(self.inputs[take])
        ys = {name: lab[take] for name, lab in self.labels.items()}
        return x, ys


def _smooth(x):
    # cheap 3x3 box blur to give the patterns spatial structure
    out = x.copy()
    for shift in (-1, 1):
        out += np.roll(x, shift, axis=2) + np.roll(x, shift, axis=3)
    return out / 5.0


def _template_bank(k, input_shape, rng):
    """k fixed spatial patterns, one per class: a random zero-mean 3x3
    motif per channel, tiled across the image. Tiling gives the pattern a
    local signature a small conv kernel can match, while the zero mean
    keeps global average pooling of the raw input class-blind (so a
    parameter-free skip path cannot solve the task). Unit L2 norm each."""
    c, h, w = input_shape
    motifs = rng.normal(size=(k, c, 3, 3))
    motifs -= motifs.mean(axis=(2, 3), keepdims=True)
    reps = (h + 2) // 3, (w + 2) // 3
    bank = np.tile(motifs, (1, 1) + reps)[:, :, :h, :w]
    bank /= np.linalg.norm(bank.reshape(k, -1), axis=1).reshape(k, 1, 1, 1)
    return bank


def make_synthetic_tasks(tasks, seed, n_samples=2000, input_shape=(3, 16, 16),
                         rho=1.0, val_fraction=0.1, margin=6.0):
    """Shared procedural inputs with one planted class template per task.

    Labels are drawn uniformly first (classes are balanced by
    construction); each classification task then adds its class's fixed
    spatial template to the input at amplitude `margin`. Task 1's labels
    are the reference; a later task with the same label shape copies them
    with probability rho per sample (rho=1: identical labels, rho=0:
    independent). Regression tasks plant a random mixture of their
    templates and use the normalized mixing coefficients as targets."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = _smooth(rng.normal(size=(n_samples,) + tuple(input_shape)))
    labels = {}
    ref = None
    for i, task in enumerate(tasks):
        bank = _template_bank(task.out_dim, input_shape, rng)
        if task.kind == "classification":
            y = rng.integers(0, task.out_dim, size=n_samples)
            if i > 0 and ref is not None and ref[0] == "classification" \
                    and tasks[0].out_dim == task.out_dim:
                y = np.where(rng.random(n_samples) < rho, ref[1], y)
            if i == 0:
                ref = ("classification", y)
            x += margin * bank[y]
            labels[task.name] = y
        else:
            c = rng.normal(size=(n_samples, task.out_dim))
            if i > 0 and ref is not None and ref[0] == "regression" \
                    and ref[1].shape == c.shape:
                c = rho * ref[1] + (1.0 - rho) * c
            if i == 0:
                ref = ("regression", c)
            x += (margin / np.sqrt(task.out_dim)) * np.einsum(
                "nk,kchw->nchw", c, bank)
            labels[task.name] = c / (np.linalg.norm(c, axis=1, keepdims=True) + 1e-12)
    n_val = max(1, int(n_samples * val_fraction))
    perm = rng.permutation(n_samples)
    return SyntheticTaskSet(list(tasks), x, labels, perm[n_val:], perm[:n_val], rho)


# ---- losses ----


def task_loss(task, pred, target):
    if task.loss == "cross_entropy":
        return T.cross_entropy(pred, target)
    if task.loss == "l1":
        return T.l1_loss(pred, T.Tensor(target))
    if task.loss == "cosine_inverse":
        return T.cosine_inverse_loss(pred, T.Tensor(target))
    raise ValueError(f"unknown loss {task.loss!r}")


class _DivergenceGuard:
    def __init__(self, patience=3):
        self.patience = patience
        self.bad = 0

    def check(self, value, stage):
        if np.isfinite(value):
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                raise Divergence(f"{stage}: loss non-finite for {self.bad} consecutive iterations")


def _task_weights(cfg, tasks):
    if cfg.task_weights is None:
        return [1.0] * len(tasks)
    return list(cfg.task_weights)


# ---- metrics logging ----


class MetricsLog:
    FIELDS = ("stage", "iter", "split", "losses", "l_reg", "tau", "lr")

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(self.FIELDS)
        else:
            self._fh = None

    def add(self, stage, iteration, split, losses, l_reg=None, tau=None, lr=None):
        row = (stage, iteration, split,
               ";".join(f"{v:.17g}" for v in losses),
               "" if l_reg is None else f"{l_reg:.17g}",
               "" if tau is None else f"{tau:.17g}",
               "" if lr is None else f"{lr:.17g}")
        self.rows.append(row)
        if self._fh:
            self._writer.writerow(row)
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# ---- stages ----


def pretrain(supermodel, data, cfg, streams, log=None, run_dir=None):
    """Warm up all weights with branch-averaged forwards; logits frozen."""
    if cfg.pre_iters == 0:
        return supermodel
    weights = _task_weights(cfg, supermodel.tasks)
    opt = SGD(supermodel.weight_parameters(), cfg.weight_lr, cfg.weight_momentum,
              schedule=StepDecay(cfg.lr_decay_factor, cfg.lr_decay_every))
    guard = _DivergenceGuard()
    for it, take in enumerate(data.batches(streams.data, cfg.batch_size, iters=cfg.pre_iters)):
        x, ys = data.batch_arrays(take)
        losses = []
        for i, task in enumerate(supermodel.tasks):
            pred, _ = supermodel.forward_task(x, i, "pretrain")
            losses.append(task_loss(task, pred, ys[task.name]))
        loss = total_loss(losses, weights, None, 0.0)
        guard.check(loss.item(), "pretrain")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (it % cfg.val_every == 0 or it == cfg.pre_iters - 1):
            log.add("pretrain", it, "train", [l.item() for l in losses], lr=opt.lr)
        if run_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(run_dir, "checkpoints", f"pretrain_{it + 1}.npz"),
                            supermodel, {"weights": opt}, streams)
    return supermodel


def _soft_weights_for_task(supermodel, task, gumbels, tau, hard=False):
    out = []
    for v in supermodel.choice_vcns:
        g = gumbels[v.depth_index][task][:v.branches]
        w = soft_policy(v.logits[task], g, tau)
        if hard:
            onehot = np.zeros(v.branches)
            onehot[int(np.argmax(w.data))] = 1.0
            w = w + T.Tensor(onehot - w.data)  # straight-through
        out.append(w)
    return out


def policy_train(supermodel, data, cfg, streams, log=None, run_dir=None):
    """Alternate weight updates (half A) and logit updates (half B) every
    cfg.alternation_period batches; Gumbel noise is redrawn per batch and
    tau follows the exponential schedule. Returns (supermodel, PolicyState)."""
    weights = _task_weights(cfg, supermodel.tasks)
    half = len(data.train_idx) // 2
    half_a, half_b = data.train_idx[:half], data.train_idx[half:]
    w_opt = SGD(supermodel.weight_parameters(), cfg.weight_lr, cfg.weight_momentum,
                schedule=StepDecay(cfg.lr_decay_factor, cfg.lr_decay_every))
    p_opt = Adam(supermodel.policy_parameters(), cfg.policy_lr)
    guard = _DivergenceGuard()
    gen_a = data.batches(streams.data, cfg.batch_size, indices=half_a)
    gen_b = data.batches(streams.data, cfg.batch_size, indices=half_b)
    n, L = supermodel.N, supermodel.L
    tau = cfg.tau_start
    for it in range(cfg.policy_iters):
        phase_weights = (it // cfg.alternation_period) % 2 == 0
        take = next(gen_a) if phase_weights else next(gen_b)
        x, ys = data.batch_arrays(take)
        tau = temperature_schedule(it, cfg.policy_iters, cfg.tau_start, cfg.tau_end)
        gumbels = T.gumbel_noise((L, n, 3), streams.gumbel).data
        losses = []
        soft_policies = []
        for i, task in enumerate(supermodel.tasks):
            sw = _soft_weights_for_task(supermodel, i, gumbels, tau, cfg.hard_sampling)
            soft_policies.append(sw)
            pred, _ = supermodel.forward_task(x, i, "policy", soft_weights=sw)
            losses.append(task_loss(task, pred, ys[task.name]))
        l_reg = policy_regularization(soft_policies, L) if L else None
        loss = total_loss(losses, weights, l_reg, cfg.lambda_reg)
        guard.check(loss.item(), "policy-train")
        w_opt.zero_grad()
        p_opt.zero_grad()
        loss.backward()
        if phase_weights:
            w_opt.step()
        else:
            p_opt.step()
        if log and (it % cfg.val_every == 0 or it == cfg.policy_iters - 1):
            log.add("policy", it, "train", [l.item() for l in losses],
                    l_reg=l_reg.item() if l_reg is not None else None,
                    tau=tau, lr=w_opt.lr if phase_weights else p_opt.lr)
        if run_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(run_dir, "checkpoints", f"policy_{it + 1}.npz"),
                            supermodel, {"weights": w_opt, "policy": p_opt}, streams)
    return supermodel, PolicyState.from_supermodel(supermodel, tau)


def post_train(supermodel, discrete_policy, data, cfg, streams, log=None, run_dir=None):
    """Train the pruned model with the sharing policy fixed. retrain mode
    re-initializes every retained weight from the weight seed; fine-tune
    keeps the supermodel weights."""
    model = derive_model(supermodel, discrete_policy)
    if cfg.post_mode == "retrain":
        model.reinit_weights(np.random.Generator(np.random.PCG64(cfg.seed_weights)))
    elif cfg.post_mode != "fine-tune":
        raise ValueError(f"unknown post_mode {cfg.post_mode!r}")
    weights = _task_weights(cfg, supermodel.tasks)
    opt = SGD(model.weight_parameters(), cfg.weight_lr, cfg.weight_momentum,
              schedule=StepDecay(cfg.lr_decay_factor, cfg.lr_decay_every))
    guard = _DivergenceGuard()
    for it, take in enumerate(data.batches(streams.data, cfg.batch_size, iters=cfg.post_iters)):
        x, ys = data.batch_arrays(take)
        outputs = model.forward_multitask(x)
        losses = [task_loss(task, outputs[task.name], ys[task.name])
                  for task in model.tasks]
        loss = total_loss(losses, weights, None, 0.0)
        guard.check(loss.item(), "post-train")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and (it % cfg.val_every == 0 or it == cfg.post_iters - 1):
            log.add("post", it, "train", [l.item() for l in losses], lr=opt.lr)
        if run_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(run_dir, "checkpoints", f"post_{it + 1}.npz"),
                            supermodel, {"weights": opt}, streams)
    return model


def evaluate(model, data, split="val"):
    """Per-task mean loss (and accuracy for classification) on a split."""
    idx = data.val_idx if split == "val" else data.train_idx
    x = T.Tensor(data.inputs[idx])
    outputs = model.forward_multitask(x, training=False)
    metrics = {}
    for task in model.tasks:
        pred = outputs[task.name]
        target = data.labels[task.name][idx]
        loss = task_loss(task, pred, target).item()
        metrics[task.name] = {"loss": loss}
        if task.kind == "classification":
            acc = float((pred.data.argmax(axis=1) == target).mean())
            metrics[task.name]["accuracy"] = acc
    return metrics


def run_pipeline(supermodel, data, cfg, run_dir=None, sample_seed=10):
    """pre-train -> policy-train -> sample -> post-train -> evaluate."""
    streams = cfg.streams()
    log = MetricsLog(os.path.join(run_dir, "metrics.csv") if run_dir else None)
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "config.json"), "w") as f:
            json.dump(cfg.to_dict(), f, indent=2)
    if not cfg.skip_pretrain:
        pretrain(supermodel, data, cfg, streams, log, run_dir)
    supermodel, state = policy_train(supermodel, data, cfg, streams, log, run_dir)
    discrete = sample_policy(state, sample_seed)
    model = post_train(supermodel, discrete, data, cfg, streams, log, run_dir)
    metrics = evaluate(model, data)
    if run_dir:
        with open(os.path.join(run_dir, "policy.json"), "w") as f:
            json.dump({"seed": sample_seed, "policy": discrete.tolist(),
                       "pi": [p.tolist() for p in state.pis()],
                       "temperature": state.temperature}, f, indent=2)
        with open(os.path.join(run_dir, "eval.json"), "w") as f:
            json.dump(metrics, f, indent=2)
    log.close()
    return model, state, discrete, metrics


# ---- checkpointing ----


def named_parameters(supermodel):
    out = {}
    for v in supermodel.choice_vcns:
        for j, p in enumerate(v.shared.parameters()):
            out[f"vcn{v.node_id}.shared.{j}"] = p
        for ti, sp in enumerate(v.task_specific):
            for j, p in enumerate(sp.parameters()):
                out[f"vcn{v.node_id}.task{ti}.{j}"] = p
        for ti, lg in enumerate(v.logits):
            out[f"vcn{v.node_id}.logits{ti}"] = lg
    for ti, h in enumerate(supermodel.heads):
        for j, p in enumerate(h.parameters()):
            out[f"head{ti}.{j}"] = p
    return out


def save_checkpoint(path, supermodel, optimizers, streams):
    """Versioned npz blob: named parameter arrays, optimizer state, RNG
    stream states. Restores bit-exactly."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    arrays = {}
    for name, p in named_parameters(supermodel).items():
        arrays[f"p/{name}"] = p.data
    meta = {"version": CHECKPOINT_VERSION, "rng": streams.state(), "optim": {}}
    for oname, opt in optimizers.items():
        st = opt.state()
        meta["optim"][oname] = {"lr": st["lr"], "step_count": st["step_count"],
                                "slot_keys": {}}
        for skey, slot in st["slots"].items():
            meta["optim"][oname]["slot_keys"][skey] = len(slot)
            for i, arr in enumerate(slot):
                arrays[f"o/{oname}/{skey}/{i}"] = arr
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, supermodel, optimizers, streams):
    blob = np.load(path)
    meta = json.loads(bytes(blob["meta"]).decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    params = named_parameters(supermodel)
    for name, p in params.items():
        p.data = blob[f"p/{name}"].copy()
    for oname, opt in optimizers.items():
        ometa = meta["optim"][oname]
        slots = {}
        for skey, count in ometa["slot_keys"].items():
            slots[skey] = [blob[f"o/{oname}/{skey}/{i}"].copy() for i in range(count)]
        opt.set_state({"lr": ometa["lr"], "step_count": ometa["step_count"], "slots": slots})
    streams.set_state(meta["rng"])
