"""Typed operator graph: topology, shape inference, parameter counting.

Tensor layout is (channels, height, width) per sample; the batch dimension
only exists inside the tensor engine. Conv/Pool spatial rule:
out = floor((in + 2*pad - kernel) / stride) + 1.
"""

from dataclasses import dataclass, field, replace

from .errors import CycleDetected, ShapeMismatch, ShapesMissing

PARAMETERIZED_KINDS = ("Convolution", "InnerProduct", "BatchNorm")


@dataclass
class OperatorNode:
    id: int
    kind: str
    name: str
    parents: list
    params: dict
    in_shapes: list = field(default_factory=list)  # one (C,H,W) per parent
    out_shape: tuple = None
    param_count: int = 0

    @property
    def parameterized(self):
        return self.kind in PARAMETERIZED_KINDS

    @property
    def in_shape(self):
        return self.in_shapes[0] if self.in_shapes else None


@dataclass
class OperatorGraph:
    nodes: list
    inputs: dict          # tensor name -> (C,H,W) or None before inference
    outputs: list         # node ids with no consumers
    input_consumers: dict  # node id -> list of input tensor names it reads

    @property
    def L_total(self):
        return len(self.nodes)

    @property
    def L_param(self):
        return sum(1 for n in self.nodes if n.parameterized)

    def total_params(self):
        return sum(n.param_count for n in self.nodes)

    def to_json_dict(self):
        return {
            "inputs": {k: list(v) if v else None for k, v in self.inputs.items()},
            "outputs": list(self.outputs),
            "nodes": [
                {"id": n.id, "kind": n.kind, "name": n.name,
                 "parents": list(n.parents),
                 "params": dict(n.params),
                 "in_shapes": [list(s) for s in n.in_shapes],
                 "out_shape": list(n.out_shape) if n.out_shape else None,
                 "param_count": n.param_count,
                 "parameterized": n.parameterized}
                for n in self.nodes
            ],
        }


def build_graph(spec):
    """One node per non-Input layer; edges follow bottom/top tensor names.

    Topological order equals document order (the parser guarantees forward
    references only); a defensive cycle check runs anyway.
    """
    inputs = {}
    for layer in spec.layers:
        if layer.kind == "Input":
            shape = layer.params.get("shape")
            if shape and len(shape) == 4:
                shape = shape[1:]  # drop batch dim
            inputs[layer.tops[0]] = tuple(shape) if shape else None

    nodes = []
    producer = {}  # tensor name -> node id
    input_consumers = {}
    for layer in spec.layers:
        if layer.kind == "Input":
            continue
        nid = len(nodes)
        parents = []
        for b in layer.bottoms:
            if b in producer:
                parents.append(producer[b])
            elif b in inputs:
                input_consumers.setdefault(nid, []).append(b)
            else:
                raise CycleDetected(f"unresolved tensor {b!r}")
        node = OperatorNode(nid, layer.kind, layer.name, parents, dict(layer.params))
        nodes.append(node)
        for t in layer.tops:
            producer[t] = nid

    consumed = {p for n in nodes for p in n.parents}
    outputs = [n.id for n in nodes if n.id not in consumed]
    for n in nodes:
        if any(p >= n.id for p in n.parents):
            raise CycleDetected(f"node {n.name} has non-forward parent")
    return OperatorGraph(nodes, inputs, outputs, input_consumers)


def _conv_pool_spatial(h, w, k, stride, pad, node_name):
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch(node_name, f"non-positive output size {oh}x{ow}")
    return oh, ow


def _node_out_shape(node, in_shapes):
    kind = node.kind
    p = node.params
    if kind == "Convolution":
        c, h, w = in_shapes[0]
        oh, ow = _conv_pool_spatial(h, w, p["kernel_size"], p.get("stride", 1),
                                    p.get("pad", 0), node.name)
        return (p["num_output"], oh, ow)
    if kind == "Pooling":
        c, h, w = in_shapes[0]
        oh, ow = _conv_pool_spatial(h, w, p["kernel_size"], p.get("stride", 1),
                                    p.get("pad", 0), node.name)
        return (c, oh, ow)
    if kind == "InnerProduct":
        return (p["num_output"], 1, 1)
    if kind == "Eltwise":
        if len(set(in_shapes)) != 1:
            raise ShapeMismatch(node.name, f"eltwise parents differ: {in_shapes}")
        return in_shapes[0]
    if kind == "Concat":
        spatials = {(s[1], s[2]) for s in in_shapes}
        if len(spatials) != 1:
            raise ShapeMismatch(node.name, f"concat spatial sizes differ: {in_shapes}")
        c = sum(s[0] for s in in_shapes)
        return (c, in_shapes[0][1], in_shapes[0][2])
    # ReLU, BatchNorm, Dropout preserve shape
    return in_shapes[0]


def count_params(node):
    """Parameter count from inferred shapes. BatchNorm counts scale+shift
    only (running statistics are buffers, not parameters)."""
    if node.out_shape is None or not node.in_shapes:
        raise ShapesMissing(f"node {node.name} has no inferred shapes")
    kind, p = node.kind, node.params
    if kind == "Convolution":
        in_c = node.in_shapes[0][0]
        out_c = p["num_output"]
        k = p["kernel_size"]
        n = out_c * in_c * k * k
        if p.get("bias_term", True):
            n += out_c
        return n
    if kind == "InnerProduct":
        c, h, w = node.in_shapes[0]
        n = p["num_output"] * c * h * w
        if p.get("bias_term", True):
            n += p["num_output"]
        return n
    if kind == "BatchNorm":
        return 2 * node.in_shapes[0][0]
    return 0


def infer_shapes(graph, input_shape=None):
    """Fill in_shapes/out_shape/param_count for every node; returns a new
    graph. `input_shape` overrides every unannotated entry tensor."""
    inputs = dict(graph.inputs)
    for name in inputs:
        if inputs[name] is None:
            if input_shape is None:
                raise ShapesMissing(f"input {name!r} has no shape")
            inputs[name] = tuple(input_shape)
        elif input_shape is not None:
            inputs[name] = tuple(input_shape)
    out_shapes = {}
    new_nodes = []
    for node in graph.nodes:
        in_shapes = [out_shapes[p] for p in node.parents]
        for tname in graph.input_consumers.get(node.id, []):
            in_shapes.insert(0, inputs[tname])
        n = replace(node, in_shapes=in_shapes)
        n.out_shape = _node_out_shape(n, in_shapes)
        n.param_count = count_params(n)
        out_shapes[n.id] = n.out_shape
        new_nodes.append(n)
    return OperatorGraph(new_nodes, inputs, list(graph.outputs),
                         {k: list(v) for k, v in graph.input_consumers.items()})


def topo_order(graph):
    """Deterministic topological order: document order, which the build
    invariants guarantee is already topological."""
    return [n.id for n in graph.nodes]
