"""Compile an operator graph plus a task list into a supermodel of
virtual computation nodes, and derive pruned multi-task models from
discrete sharing policies.

Only parameter-bearing operators (Convolution, InnerProduct, BatchNorm)
become choice nodes with {shared, task-specific, skip} branches; the rest
are pass-through nodes executed on every task path. Skip branches are
parameter-free; when the required downsample ratio is not an integer the
skip branch is disabled and that node becomes a 2-way choice.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops as O
from . import tensor as T
from .errors import EmptyTaskList, IncompatibleShapes, PolicyShapeMismatch
from .graph import topo_order

BRANCH_SHARED, BRANCH_SPECIFIC, BRANCH_SKIP = 0, 1, 2


@dataclass
class TaskSpec:
    name: str
    kind: str = "classification"      # or "regression"
    out_dim: int = 4
    loss: str = "cross_entropy"       # cross_entropy | l1 | cosine_inverse
    weight: float = 1.0


class ChoiceVcn:
    """Choice node: one shared op, per-task deep copies, per-task skips,
    per-task policy logits (initialized to zeros)."""

    def __init__(self, node, parents, shared, n_tasks):
        self.node_id = node.id
        self.kind = node.kind
        self.name = node.name
        self.parents = parents
        self.in_shape = node.in_shapes[0]
        self.out_shape = node.out_shape
        self.shared = shared
        self.task_specific = [shared.clone() for _ in range(n_tasks)]
        try:
            skip = O.SkipOp(node.in_shapes[0], node.out_shape)
            self.skips = [skip for _ in range(n_tasks)]  # stateless, shareable
            self.branches = 3
        except IncompatibleShapes:
            self.skips = None
            self.branches = 2
        self.logits = [T.Tensor(np.zeros(self.branches), requires_grad=True)
                       for _ in range(n_tasks)]
        self.depth_index = None  # assigned by the compiler

    def branch_ops(self, task):
        branches = [self.shared, self.task_specific[task]]
        if self.skips is not None:
            branches.append(self.skips[task])
        return branches


class PassVcn:
    """Pass-through node (no policy): executed on every task path."""

    def __init__(self, node, parents, op):
        self.node_id = node.id
        self.kind = node.kind
        self.name = node.name
        self.parents = parents
        self.out_shape = node.out_shape
        self.op = op


@dataclass
class Supermodel:
    vcns: list
    tasks: list
    heads: list               # one HeadOp per task
    output_node: int
    input_shape: tuple
    backbone_capacity: int    # C: parameter count of the backbone's parameterized ops

    @property
    def choice_vcns(self):
        return [v for v in self.vcns if isinstance(v, ChoiceVcn)]

    @property
    def L(self):
        return len(self.choice_vcns)

    @property
    def N(self):
        return len(self.tasks)

    def search_space_size(self):
        size = 1
        for v in self.choice_vcns:
            size *= v.branches ** self.N
        return size

    def weight_parameters(self):
        params = []
        for v in self.vcns:
            if isinstance(v, ChoiceVcn):
                params.extend(v.shared.parameters())
                for sp in v.task_specific:
                    params.extend(sp.parameters())
        for h in self.heads:
            params.extend(h.parameters())
        return params

    def policy_parameters(self):
        return [lg for v in self.choice_vcns for lg in v.logits]

    def head_params_total(self):
        return sum(h.param_count for h in self.heads)

    # ---- forwards ----

    def _gather(self, v, values, x):
        ins = [values[p] for p in v.parents]
        if not ins:
            ins = [x]
        return ins

    def forward_task(self, x, task, mode, soft_weights=None, training=True):
        """Run one task path through the supermodel.

        mode 'pretrain': each choice node outputs the unweighted mean of its
        available branches. mode 'policy': the soft_weights[depth] Tensor
        (one probability per branch) weights the branch outputs.
        Returns (head_output, backbone_output).
        """
        values = {}
        for v in self.vcns:
            ins = self._gather(v, values, x)
            if isinstance(v, PassVcn):
                arg = ins if v.kind in ("Eltwise", "Concat") else ins[0]
                values[v.node_id] = v.op(arg, training=training)
                continue
            outs = [op(ins[0], training=training) for op in v.branch_ops(task)]
            if mode == "pretrain":
                acc = outs[0]
                for o in outs[1:]:
                    acc = acc + o
                values[v.node_id] = acc * (1.0 / len(outs))
            elif mode == "policy":
                w = soft_weights[v.depth_index]
                acc = w[0] * outs[0]
                for k in range(1, len(outs)):
                    acc = acc + w[k] * outs[k]
                values[v.node_id] = acc
            else:
                raise ValueError(f"unknown mode {mode!r}")
        backbone_out = values[self.output_node]
        return self.heads[task](backbone_out, training=training), backbone_out

    def export_summary(self):
        rows = []
        for v in self.vcns:
            row = {"node_id": v.node_id, "kind": v.kind, "name": v.name,
                   "out_shape": list(v.out_shape)}
            if isinstance(v, ChoiceVcn):
                row.update({"choice": True, "depth_index": v.depth_index,
                            "in_shape": list(v.in_shape),
                            "param_count": v.shared.param_count,
                            "branches": v.branches,
                            "skip_available": v.skips is not None})
            else:
                row["choice"] = False
            rows.append(row)
        return {
            "tasks": [t.name for t in self.tasks],
            "L": self.L,
            "N": self.N,
            "backbone_capacity": self.backbone_capacity,
            "head_params": [h.param_count for h in self.heads],
            "search_space_size": str(self.search_space_size()),
            "vcns": rows,
        }


def make_skip(in_shape, out_shape):
    """Parameter-free skip: identity, or strided average pool plus channel
    zero-pad/truncate. Raises IncompatibleShapes for non-integer ratios."""
    return O.SkipOp(in_shape, out_shape)


def compile_supermodel(graph, tasks, streams):
    """One VCN per graph node in topological order; parameterized nodes get
    per-task copies, skips, and zero-initialized logit triples; per-task
    heads attach after the last backbone node."""
    if not tasks:
        raise EmptyTaskList("need at least one task")
    n = len(tasks)
    vcns = []
    depth = 0
    capacity = 0
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        op = O.make_op(node, streams.weights, streams.dropout)
        if node.parameterized:
            vcn = ChoiceVcn(node, list(node.parents), op, n)
            vcn.depth_index = depth
            depth += 1
            capacity += op.param_count
            vcns.append(vcn)
        else:
            vcns.append(PassVcn(node, list(node.parents), op))
    output_node = graph.outputs[-1]
    out_shape = graph.nodes[output_node].out_shape
    heads = [O.HeadOp(out_shape, t.out_dim, streams.weights) for t in tasks]
    input_name = next(iter(graph.inputs))
    return Supermodel(vcns, list(tasks), heads, output_node,
                      tuple(graph.inputs[input_name]), capacity)


def compile_timed(graph, tasks, streams):
    t0 = time.perf_counter()
    sm = compile_supermodel(graph, tasks, streams)
    return sm, time.perf_counter() - t0


def capacity_bounds(supermodel):
    """(min_params, max_params) of derivable models, plus the all-shared
    point. 2-way nodes cannot be skipped, so they contribute at least one
    shared copy to the minimum."""
    heads = supermodel.head_params_total()
    n = supermodel.N
    forced = sum(v.shared.param_count for v in supermodel.choice_vcns if v.skips is None)
    min_params = heads + forced
    max_params = n * supermodel.backbone_capacity + heads
    all_shared = supermodel.backbone_capacity + heads
    return min_params, max_params, all_shared


@dataclass
class MultiTaskModel:
    supermodel: Supermodel
    policy: np.ndarray                 # (N, L) ints
    task_ops: list                     # per task: {node_id: op}
    counters: dict = field(default_factory=dict)

    @property
    def tasks(self):
        return self.supermodel.tasks

    def param_total(self):
        seen = set()
        total = 0
        for per_task in self.task_ops:
            for op in per_task.values():
                if op.param_count and id(op) not in seen:
                    seen.add(id(op))
                    total += op.param_count
        for h in self.supermodel.heads:
            total += h.param_count
        return total

    def param_breakdown(self):
        shared = specific = 0
        counted = set()
        for v in self.supermodel.choice_vcns:
            for i in range(len(self.tasks)):
                op = self.task_ops[i][v.node_id]
                if id(op) in counted:
                    continue
                counted.add(id(op))
                if op is v.shared:
                    shared += op.param_count
                elif op.param_count:
                    specific += op.param_count
        return {"shared": shared, "task_specific": specific, "skip": 0,
                "heads": self.supermodel.head_params_total()}

    def weight_parameters(self):
        seen = set()
        params = []
        for per_task in self.task_ops:
            for op in per_task.values():
                if id(op) in seen:
                    continue
                seen.add(id(op))
                params.extend(op.parameters())
        for h in self.supermodel.heads:
            params.extend(h.parameters())
        return params

    def reinit_weights(self, rng):
        seen = set()
        for per_task in self.task_ops:
            for op in per_task.values():
                if id(op) not in seen:
                    seen.add(id(op))
                    op.reinit(rng)
        for h in self.supermodel.heads:
            h.reinit(rng)

    def forward_multitask(self, x, training=True):
        """Per-task outputs with computation reuse: a node whose operator
        instance and upstream computation are identical across tasks
        executes once per batch. Execution counters per node id are stored
        in self.counters."""
        self.counters = {v.node_id: 0 for v in self.supermodel.vcns}
        cache = {}  # structural key -> output tensor
        outputs = {}
        for i, task in enumerate(self.tasks):
            values = {}
            keys = {}
            for v in self.supermodel.vcns:
                op = self.task_ops[i][v.node_id]
                parent_keys = tuple(keys[p] for p in v.parents) or ("input",)
                key = (v.node_id, id(op), parent_keys)
                keys[v.node_id] = key
                if key in cache:
                    values[v.node_id] = cache[key]
                    continue
                ins = [values[p] for p in v.parents] or [x]
                arg = ins if v.kind in ("Eltwise", "Concat") else ins[0]
                out = op(arg, training=training)
                cache[key] = out
                values[v.node_id] = out
                self.counters[v.node_id] += 1
            head = self.supermodel.heads[i]
            outputs[task.name] = head(values[self.supermodel.output_node], training=training)
        return outputs


def derive_model(supermodel, policy):
    """Prune the supermodel under a discrete policy: per task each choice
    node keeps exactly the selected branch; pass-through ops are reused
    across tasks."""
    policy = np.asarray(policy)
    if policy.shape != (supermodel.N, supermodel.L):
        raise PolicyShapeMismatch(
            f"policy shape {policy.shape} != ({supermodel.N}, {supermodel.L})")
    for v in supermodel.choice_vcns:
        bad = policy[:, v.depth_index] >= v.branches
        if bad.any():
            raise PolicyShapeMismatch(
                f"node {v.node_id} offers {v.branches} branches; got choice "
                f"{policy[:, v.depth_index].max()}")
    task_ops = []
    for i in range(supermodel.N):
        per_task = {}
        for v in supermodel.vcns:
            if isinstance(v, PassVcn):
                per_task[v.node_id] = v.op
            else:
                choice = int(policy[i, v.depth_index])
                if choice == BRANCH_SHARED:
                    per_task[v.node_id] = v.shared
                elif choice == BRANCH_SPECIFIC:
                    per_task[v.node_id] = v.task_specific[i]
                else:
                    per_task[v.node_id] = v.skips[i]
        task_ops.append(per_task)
    return MultiTaskModel(supermodel, policy.copy(), task_ops)
