"""Evaluation formulas (relative performance vs single-task baselines,
parameter accounting) and policy visualization exports."""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ZeroReference


@dataclass
class MetricSet:
    """Named metric values with direction flags, grouped per task.

    values: task name -> {metric name -> value}
    directions: metric name -> 0 (higher is better) or 1 (lower is better)
    """
    values: dict
    directions: dict


@dataclass
class ParamReport:
    absolute: int
    stl_total: int
    relative_percent: float
    breakdown: dict = field(default_factory=dict)


def round_half_away(x, ndigits=1):
    """Round half away from zero, as the published tables do."""
    scale = 10 ** ndigits
    return np.sign(x) * np.floor(abs(x) * scale + 0.5) / scale


def relative_performance(method, stl):
    """Per-task signed percent improvement over the single-task baseline,
    averaged across that task's metrics. Lower-is-better metrics flip sign."""
    deltas = {}
    for task, mvals in method.values.items():
        svals = stl.values[task]
        if set(mvals) != set(svals):
            raise DimensionMismatch(f"task {task!r}: metric names differ")
        total = 0.0
        for name, mv in mvals.items():
            sv = svals[name]
            if sv == 0:
                raise ZeroReference(name)
            s = method.directions[name]
            total += (-1) ** s * (mv - sv) / sv * 100.0
        deltas[task] = total / len(mvals)
    return deltas


def overall_delta(per_task_deltas):
    vals = list(per_task_deltas.values()) if isinstance(per_task_deltas, dict) \
        else list(per_task_deltas)
    if not vals:
        raise DimensionMismatch("need at least one task delta")
    return sum(vals) / len(vals)


def param_report(absolute, stl_total, breakdown=None):
    if stl_total <= 0:
        raise ZeroReference("stl_total")
    rel = (absolute - stl_total) / stl_total * 100.0
    if breakdown is not None and sum(breakdown.values()) != absolute:
        raise DimensionMismatch("breakdown does not sum to the absolute count")
    return ParamReport(absolute, stl_total, rel, breakdown or {})


def export_policy_viz(state, supermodel=None, discrete=None):
    """Heatmap + sharing-pattern JSON dict. Heatmap cells are the pi
    probabilities per (task, choice node, branch); the sharing pattern
    lists each task's selected branch per node when a discrete policy is
    given."""
    pis = state.pis()
    n, L = state.n_tasks, state.n_nodes
    if supermodel is not None and (supermodel.N != n or supermodel.L != L):
        raise DimensionMismatch(
            f"policy ({n}, {L}) does not match supermodel ({supermodel.N}, {supermodel.L})")
    if discrete is not None and np.asarray(discrete).shape != (n, L):
        raise DimensionMismatch("discrete policy shape mismatch")
    heatmap = [[[float(p) for p in pis[l][i]] for l in range(L)] for i in range(n)]
    out = {
        "temperature": state.temperature,
        "n_tasks": n,
        "n_nodes": L,
        "branch_names": ["shared", "task_specific", "skip"],
        "heatmap": heatmap,
        "depth_index": list(range(L)),
    }
    if supermodel is not None:
        out["node_ids"] = [v.node_id for v in supermodel.choice_vcns]
        out["branches"] = [v.branches for v in supermodel.choice_vcns]
    if discrete is not None:
        discrete = np.asarray(discrete)
        out["sharing_pattern"] = [
            {"task": i,
             "path": [int(c) for c in discrete[i]],
             "unselected": [[b for b in range(len(pis[l][i])) if b != int(discrete[i][l])]
                            for l in range(L)]}
            for i in range(n)
        ]
    return out


def policy_viz_svg(viz):
    """Small standalone SVG heatmap generated from the JSON export."""
    cell, gap = 18, 2
    n, L = viz["n_tasks"], viz["n_nodes"]
    rows = n * 3 + (n - 1)
    width = L * (cell + gap) + 120
    height = rows * (cell + gap) + 20
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    y = 10
    for i in range(n):
        for b in range(3):
            x0 = 110
            parts.append(f'<text x="4" y="{y + cell - 4}" font-size="10">'
                         f't{i} {viz["branch_names"][b]}</text>')
            for l in range(L):
                probs = viz["heatmap"][i][l]
                v = probs[b] if b < len(probs) else 0.0
                shade = int(255 * (1 - v))
                parts.append(
                    f'<rect x="{x0 + l * (cell + gap)}" y="{y}" width="{cell}" '
                    f'height="{cell}" fill="rgb({shade},{shade},255)"/>')
            y += cell + gap
        y += cell + gap
    parts.append("</svg>")
    return "\n".join(parts)


def sharing_statistics(policy, branch_counts=None):
    """Shared/specific/skip fractions per task and overall, plus a
    bottom-half vs top-half depth split."""
    policy = np.asarray(policy)
    n, L = policy.shape
    def fractions(block):
        total = block.size
        return {"shared_fraction": float((block == 0).sum() / total),
                "specific_fraction": float((block == 1).sum() / total),
                "skip_fraction": float((block == 2).sum() / total)}
    half = L // 2
    out = {
        "overall": fractions(policy),
        "per_task": [fractions(policy[i:i + 1]) for i in range(n)],
        "bottom_half": fractions(policy[:, :half]) if half else None,
        "top_half": fractions(policy[:, half:]),
    }
    return out


def load_metric_table(csv_path, directions_path):
    """Read a metric table (rows: model, columns: task/metric/value triples
    flattened as task.metric headers) plus a direction-flag manifest."""
    import csv as _csv
    with open(directions_path) as f:
        directions = json.load(f)
    with open(csv_path) as f:
        reader = _csv.DictReader(f)
        rows = list(reader)
    tables = {}
    extras = {}
    for row in rows:
        model = row.pop("model")
        values = {}
        for key, raw in row.items():
            if raw in ("", None):
                continue
            if "." not in key:  # non-metric columns, e.g. absolute param counts
                extras.setdefault(model, {})[key] = float(raw)
                continue
            task, metric = key.split(".", 1)
            values.setdefault(task, {})[metric] = float(raw)
        tables[model] = MetricSet(values, directions)
    return tables, extras
