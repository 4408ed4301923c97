"""Exception types shared across the package."""


class MtShareError(Exception):
    pass


class ProtoSyntaxError(MtShareError):
    """Malformed prototxt text, with position info."""

    def __init__(self, line, column, expected, got=None):
        self.line = line
        self.column = column
        self.expected = expected
        self.got = got
        msg = f"line {line}, col {column}: expected {expected}"
        if got is not None:
            msg += f", got {got!r}"
        super().__init__(msg)


class UnsupportedLayer(MtShareError):
    def __init__(self, kind):
        self.kind = kind
        super().__init__(f"unsupported layer type: {kind!r}")


class DanglingReference(MtShareError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"bottom {name!r} does not name any earlier top or input")


class CycleDetected(MtShareError):
    pass


class ShapeMismatch(MtShareError):
    def __init__(self, node, detail):
        self.node = node
        self.detail = detail
        super().__init__(f"node {node}: {detail}")


class ShapesMissing(MtShareError):
    pass


class IncompatibleShapes(MtShareError):
    pass


class EmptyTaskList(MtShareError):
    pass


class PolicyShapeMismatch(MtShareError):
    pass


class LabelOutOfRange(MtShareError):
    pass


class ZeroReference(MtShareError):
    def __init__(self, metric):
        self.metric = metric
        super().__init__(f"single-task reference value for {metric!r} is zero")


class ZeroVector(MtShareError):
    pass


class DimensionMismatch(MtShareError):
    pass


class Divergence(MtShareError):
    pass
