"""Prototxt frontend: a parser for the protobuf text-format subset used by
CNN definitions.

Grammar (see docs/grammar.md):
    document := (field | message)*
    message  := ident '{' document '}'
    field    := ident ':' (string | number | ident)
Strings are double-quoted, comments start with '#'.

Nine layer kinds are supported; anything else raises UnsupportedLayer.
In-place layers (same bottom/top name) are normalized into SSA-like
distinct tensor names during parsing.
"""

from dataclasses import dataclass, field

from .errors import DanglingReference, ProtoSyntaxError, UnsupportedLayer

SUPPORTED_KINDS = (
    "Input", "Convolution", "BatchNorm", "ReLU", "Pooling",
    "InnerProduct", "Eltwise", "Concat", "Dropout",
)

# expected bottom arity per kind (None = one or more)
KIND_ARITY = {
    "Input": 0,
    "Convolution": 1,
    "BatchNorm": 1,
    "ReLU": 1,
    "Pooling": 1,
    "InnerProduct": 1,
    "Eltwise": 2,
    "Concat": None,
    "Dropout": 1,
}

_CONV_DEFAULTS = {"stride": 1, "pad": 0, "bias_term": True}


@dataclass
class LayerSpec:
    name: str
    kind: str
    bottoms: list
    tops: list
    params: dict = field(default_factory=dict)


@dataclass
class NetworkSpec:
    name: str
    layers: list

    def layer_names(self):
        return [l.name for l in self.layers]

    def to_json_dict(self):
        return {
            "name": self.name,
            "layers": [
                {"name": l.name, "kind": l.kind, "bottoms": list(l.bottoms),
                 "tops": list(l.tops), "params": dict(l.params)}
                for l in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, d):
        layers = [LayerSpec(l["name"], l["kind"], list(l["bottoms"]),
                            list(l["tops"]), dict(l["params"]))
                  for l in d["layers"]]
        return cls(d["name"], layers)


# ---- tokenizer ----

@dataclass
class _Token:
    kind: str  # ident | string | number | punct | eof
    value: object
    line: int
    col: int


def _tokenize(text):
    tokens = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
        elif ch in " \t\r,":
            i += 1
            col += 1
        elif ch == "#":
            while i < n and text[i] != "\n":
                i += 1
        elif ch in "{}:":
            tokens.append(_Token("punct", ch, line, col))
            i += 1
            col += 1
        elif ch == '"':
            start_line, start_col = line, col
            j = i + 1
            while j < n and text[j] != '"':
                if text[j] == "\n":
                    raise ProtoSyntaxError(start_line, start_col, "closing '\"'", "newline")
                j += 1
            if j >= n:
                raise ProtoSyntaxError(start_line, start_col, "closing '\"'", "end of input")
            tokens.append(_Token("string", text[i + 1:j], start_line, start_col))
            col += j + 1 - i
            i = j + 1
        elif ch.isdigit() or ch in "+-.":
            j = i
            while j < n and (text[j].isdigit() or text[j] in "+-.eE"):
                j += 1
            raw = text[i:j]
            try:
                value = int(raw)
            except ValueError:
                try:
                    value = float(raw)
                except ValueError:
                    raise ProtoSyntaxError(line, col, "a number", raw) from None
            tokens.append(_Token("number", value, line, col))
            col += j - i
            i = j
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("ident", text[i:j], line, col))
            col += j - i
            i = j
        else:
            raise ProtoSyntaxError(line, col, "identifier, value, '{', or '}'", ch)
    tokens.append(_Token("eof", None, line, col))
    return tokens


# ---- recursive-descent parser producing nested (ident -> values) docs ----

class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def parse_document(self, top_level=True):
        """Returns a list of (ident, value) pairs; value is a scalar for
        fields or a nested document list for messages."""
        items = []
        while True:
            tok = self.peek()
            if tok.kind == "eof":
                if not top_level:
                    raise ProtoSyntaxError(tok.line, tok.col, "'}'", "end of input")
                return items
            if tok.kind == "punct" and tok.value == "}":
                if top_level:
                    raise ProtoSyntaxError(tok.line, tok.col, "identifier", "'}'")
                return items
            if tok.kind != "ident":
                raise ProtoSyntaxError(tok.line, tok.col, "identifier", tok.value)
            name = self.next().value
            tok = self.peek()
            if tok.kind == "punct" and tok.value == "{":
                self.next()
                sub = self.parse_document(top_level=False)
                self.next()  # consume '}'
                items.append((name, sub))
            elif tok.kind == "punct" and tok.value == ":":
                self.next()
                val = self.peek()
                if val.kind == "punct" and val.value == "{":
                    # 'ident : { ... }' is also legal text format
                    self.next()
                    sub = self.parse_document(top_level=False)
                    self.next()
                    items.append((name, sub))
                    continue
                if val.kind not in ("string", "number", "ident"):
                    raise ProtoSyntaxError(val.line, val.col, "a value", val.value)
                self.next()
                value = val.value
                if val.kind == "ident":
                    if value == "true":
                        value = True
                    elif value == "false":
                        value = False
                items.append((name, value))
            else:
                raise ProtoSyntaxError(tok.line, tok.col, "':' or '{'", tok.value)


def _flatten_params(doc):
    """Flatten nested messages (e.g. convolution_param { ... }) into a flat
    dict. Repeated scalar fields (e.g. dim) collect into lists."""
    out = {}
    for key, value in doc:
        if isinstance(value, list) and value and isinstance(value[0], tuple):
            nested = _flatten_params(value)
            for k, v in nested.items():
                _put(out, k, v)
        elif isinstance(value, list) and not value:
            continue
        else:
            _put(out, key, value)
    return out


def _put(d, k, v):
    if k in d:
        if isinstance(d[k], list):
            d[k].append(v)
        else:
            d[k] = [d[k], v]
    else:
        d[k] = v


def _layer_from_doc(doc):
    name = None
    kind = None
    bottoms, tops = [], []
    params = []
    for key, value in doc:
        if key == "name":
            name = value
        elif key == "type":
            kind = value
        elif key == "bottom":
            bottoms.append(value)
        elif key == "top":
            tops.append(value)
        else:
            params.append((key, value))
    if kind not in SUPPORTED_KINDS:
        raise UnsupportedLayer(kind)
    flat = _flatten_params(params)
    if kind == "Convolution":
        for k, v in _CONV_DEFAULTS.items():
            flat.setdefault(k, v)
    if kind == "InnerProduct":
        flat.setdefault("bias_term", True)
    if kind == "Pooling":
        flat.setdefault("pool", "MAX")
        flat.setdefault("stride", flat.get("kernel_size", 1))
        flat.setdefault("pad", 0)
    if kind == "Input" and "dim" in flat:
        dims = flat.pop("dim")
        if not isinstance(dims, list):
            dims = [dims]
        flat["shape"] = dims
    return LayerSpec(name or "", kind, bottoms, tops, flat)


def parse_network(text):
    """Parse prototxt text into a NetworkSpec (document order preserved).

    In-place layers are rewritten so every top is a fresh SSA-like tensor
    name; later bottoms referring to the old name are redirected to the
    latest version.
    """
    doc = _Parser(_tokenize(text)).parse_document()
    net_name = ""
    layers = []
    for key, value in doc:
        if key == "name" and not isinstance(value, list):
            net_name = value
        elif key == "layer":
            layers.append(_layer_from_doc(value))
        # other top-level fields (e.g. input hints) are ignored
    # SSA normalization + reference checking
    current = {}  # visible tensor name -> current SSA name
    versions = {}
    for layer in layers:
        new_bottoms = []
        for b in layer.bottoms:
            if b not in current:
                raise DanglingReference(b)
            new_bottoms.append(current[b])
        layer.bottoms = new_bottoms
        new_tops = []
        for t in layer.tops:
            if t in versions:
                versions[t] += 1
                ssa = f"{t}__v{versions[t]}"
            else:
                versions[t] = 0
                ssa = t
            current[t] = ssa
            new_tops.append(ssa)
        layer.tops = new_tops
    return NetworkSpec(net_name, layers)


# ---- validation ----

@dataclass
class Finding:
    code: str
    layer: str
    detail: str
    warning: bool = False


@dataclass
class ValidationReport:
    findings: list

    @property
    def ok(self):
        return not any(not f.warning for f in self.findings)


def validate_spec(spec):
    """Non-fatal structural checks; findings are data, never exceptions."""
    findings = []
    seen = set()
    produced = set()
    consumed = set()
    for layer in spec.layers:
        if layer.name in seen:
            findings.append(Finding("DuplicateName", layer.name, "layer name reused"))
        seen.add(layer.name)
        arity = KIND_ARITY[layer.kind]
        if arity is not None and len(layer.bottoms) != arity:
            findings.append(Finding(
                "ArityMismatch", layer.name,
                f"{layer.kind} expects {arity} bottom(s), has {len(layer.bottoms)}"))
        if layer.kind == "Concat" and len(layer.bottoms) < 2:
            findings.append(Finding("ArityMismatch", layer.name,
                                    "Concat expects >= 2 bottoms"))
        if layer.kind == "Convolution":
            p = layer.params
            if p.get("num_output", 0) < 1:
                findings.append(Finding("BadParam", layer.name, "num_output must be >= 1"))
            if p.get("kernel_size", 0) < 1:
                findings.append(Finding("BadParam", layer.name, "kernel_size must be >= 1"))
            if p.get("stride", 1) < 1:
                findings.append(Finding("BadParam", layer.name, "stride must be >= 1"))
            if p.get("pad", 0) < 0:
                findings.append(Finding("BadParam", layer.name, "pad must be >= 0"))
        if layer.kind == "Pooling":
            p = layer.params
            if p.get("pool", "MAX") not in ("MAX", "AVE"):
                findings.append(Finding("BadParam", layer.name, f"unknown pool mode {p.get('pool')!r}"))
            if p.get("kernel_size", 0) < 1:
                findings.append(Finding("BadParam", layer.name, "kernel_size must be >= 1"))
        if layer.kind == "Eltwise":
            if layer.params.get("operation", "SUM") != "SUM":
                findings.append(Finding("BadParam", layer.name, "only SUM eltwise is supported"))
        if layer.kind == "InnerProduct" and layer.params.get("num_output", 0) < 1:
            findings.append(Finding("BadParam", layer.name, "num_output must be >= 1"))
        if layer.kind == "Input" and "shape" not in layer.params:
            findings.append(Finding("BadParam", layer.name, "Input layer needs a shape"))
        consumed.update(layer.bottoms)
        produced.update(layer.tops)
    for layer in spec.layers[:-1]:
        for t in layer.tops:
            if t not in consumed:
                findings.append(Finding("UnreferencedTop", layer.name,
                                        f"top {t!r} is never consumed", warning=True))
    return ValidationReport(findings)


# ---- pretty printer (round-trips through parse_network) ----

def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v) if isinstance(v, float) else str(v)


_PARAM_BLOCK = {
    "Convolution": "convolution_param",
    "Pooling": "pooling_param",
    "InnerProduct": "inner_product_param",
    "Eltwise": "eltwise_param",
    "Dropout": "dropout_param",
    "BatchNorm": "batch_norm_param",
}


def pretty_print(spec):
    lines = [f'name: "{spec.name}"']
    for layer in spec.layers:
        lines.append("layer {")
        lines.append(f'  name: "{layer.name}"')
        lines.append(f'  type: "{layer.kind}"')
        for b in layer.bottoms:
            lines.append(f'  bottom: "{b}"')
        for t in layer.tops:
            lines.append(f'  top: "{t}"')
        if layer.kind == "Input" and "shape" in layer.params:
            lines.append("  input_param {")
            lines.append("    shape {")
            for d in layer.params["shape"]:
                lines.append(f"      dim: {d}")
            lines.append("    }")
            lines.append("  }")
            extra = {k: v for k, v in layer.params.items() if k != "shape"}
        else:
            extra = layer.params
        if extra and layer.kind in _PARAM_BLOCK:
            lines.append(f"  {_PARAM_BLOCK[layer.kind]} {{")
            for k, v in extra.items():
                if k == "pool":
                    lines.append(f"    pool: {v}")
                else:
                    lines.append(f"    {k}: {_fmt_value(v)}")
            lines.append("  }")
        lines.append("}")
    return "\n".join(lines) + "\n"
