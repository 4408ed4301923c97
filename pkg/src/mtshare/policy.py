"""Differentiable sharing policy: Gumbel-Softmax relaxation, the
depth-weighted sharing regularizer, temperature schedule, discrete
sampling, and policy analytics."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionMismatch, ZeroVector

LOG_PI_FLOOR = -50.0


@dataclass
class PolicyState:
    """Snapshot of per-(task, choice-node) logits plus temperature.

    logits: list over choice nodes (depth order) of arrays with shape
    (n_tasks, n_branches); n_branches is 2 where the skip is disabled.
    """
    logits: list
    temperature: float
    rng_stream: str = "gumbel"

    @property
    def n_tasks(self):
        return self.logits[0].shape[0]

    @property
    def n_nodes(self):
        return len(self.logits)

    def pis(self):
        """Per-node softmax distributions, same layout as logits."""
        out = []
        for lg in self.logits:
            z = lg - lg.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
        return out

    @classmethod
    def from_supermodel(cls, supermodel, temperature):
        logits = [np.stack([lg.data.copy() for lg in v.logits])
                  for v in supermodel.choice_vcns]
        return cls(logits, temperature)


def soft_policy(logits, gumbels, tau):
    """Differentiable branch probabilities: softmax((G + log pi) / tau)
    with pi = softmax(logits). log pi is floored at -50. Accepts an engine
    Tensor (differentiable) or a plain array."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if isinstance(logits, T.Tensor):
        logpi = T.clamp_min(T.log_softmax(logits, axis=-1), LOG_PI_FLOOR)
        g = gumbels if isinstance(gumbels, T.Tensor) else T.Tensor(gumbels)
        return T.softmax((g + logpi) * (1.0 / tau), axis=-1)
    logits = np.asarray(logits, dtype=float)
    z = logits - logits.max(axis=-1, keepdims=True)
    logpi = np.maximum(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), LOG_PI_FLOOR)
    score = (np.asarray(gumbels, dtype=float) + logpi) / tau
    score -= score.max(axis=-1, keepdims=True)
    e = np.exp(score)
    return e / e.sum(axis=-1, keepdims=True)


def policy_regularization(soft_policies, L=None):
    """Depth-weighted SoftPlus penalty pushing mass toward the shared
    branch; strongest at the bottom of the network.

    soft_policies: list over tasks of lists over choice nodes (depth
    order) of per-branch probability Tensors/arrays. Depth l is 0-based,
    so weights run from 1 down to 1/L. Nodes with only 2 branches drop the
    skip term.
    """
    if L is None:
        L = len(soft_policies[0])
    total = None
    for per_task in soft_policies:
        for l, p in enumerate(per_task):
            weight = (L - l) / L
            if isinstance(p, T.Tensor):
                term = T.softplus(p[1] - p[0])
                if p.shape[-1] > 2:
                    term = term + T.softplus(p[2] - p[0])
            else:
                term = np.logaddexp(0.0, p[1] - p[0])
                if len(p) > 2:
                    term = term + np.logaddexp(0.0, p[2] - p[0])
            term = weight * term
            total = term if total is None else total + term
    return total


def total_loss(task_losses, task_weights, l_reg, lambda_reg):
    """Weighted task losses plus the policy regularizer."""
    out = None
    for loss, w in zip(task_losses, task_weights):
        term = w * loss
        out = term if out is None else out + term
    if lambda_reg and l_reg is not None:
        out = out + lambda_reg * l_reg
    return out


def temperature_schedule(iteration, total_iters, tau_start=5.0, tau_end=0.5):
    """Exponential interpolation from tau_start to tau_end."""
    if not (tau_start >= tau_end > 0):
        raise ValueError("need tau_start >= tau_end > 0")
    if total_iters <= 0:
        return tau_end
    t = min(max(iteration / total_iters, 0.0), 1.0)
    return tau_start * (tau_end / tau_start) ** t


def sample_policy(state, seed):
    """Draw a discrete policy from pi via Gumbel-max; deterministic per
    seed. Returns an (N, L) int array."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n, L = state.n_tasks, state.n_nodes
    policy = np.zeros((n, L), dtype=int)
    for l, lg in enumerate(state.logits):
        z = lg - lg.max(axis=1, keepdims=True)
        logpi = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        g = T.gumbel_noise(lg.shape, rng).data
        policy[:, l] = np.argmax(logpi + g, axis=1)
    return policy


def _flatten_soft(per_task):
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in per_task])


def _flatten_discrete(row, branch_counts):
    parts = []
    for choice, k in zip(row, branch_counts):
        onehot = np.zeros(k)
        onehot[choice] = 1.0
        parts.append(onehot)
    return np.concatenate(parts)


def task_correlation(policies, branch_counts=None):
    """Cosine similarity between per-task policy vectors.

    policies: either a list (per task) of lists of soft triples, or a
    discrete (N, L) integer array (then branch_counts gives each node's
    branch count, default 3).
    """
    if isinstance(policies, np.ndarray) and policies.ndim == 2 and \
            np.issubdtype(policies.dtype, np.integer):
        if branch_counts is None:
            branch_counts = [3] * policies.shape[1]
        vecs = [_flatten_discrete(row, branch_counts) for row in policies]
    else:
        vecs = [_flatten_soft(per_task) for per_task in policies]
    n = len(vecs)
    if n < 2:
        raise DimensionMismatch("need at least two tasks")
    dim = {v.shape for v in vecs}
    if len(dim) != 1:
        raise DimensionMismatch("task policy vectors differ in length")
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            ni, nj = np.linalg.norm(vecs[i]), np.linalg.norm(vecs[j])
            if ni == 0 or nj == 0:
                raise ZeroVector("zero-length policy vector")
            mat[i, j] = mat[j, i] = float(vecs[i] @ vecs[j] / (ni * nj))
    return mat
