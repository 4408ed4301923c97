"""Executable operator instances backing graph nodes and skip branches.

Each op owns its parameter Tensors, knows its param_count, and can clone
itself (fresh tensors, same values) for task-specific copies.
"""

import numpy as np

from . import tensor as T
from .errors import IncompatibleShapes


class Op:
    param_count = 0

    def parameters(self):
        return []

    def clone(self):
        return self

    def reinit(self, rng):
        pass

    def __call__(self, x, training=True):
        raise NotImplementedError


def kaiming_conv(rng, out_c, in_c, k):
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))


class ConvOp(Op):
    def __init__(self, in_c, out_c, k, stride, pad, bias, rng):
        self.in_c, self.out_c, self.k = in_c, out_c, k
        self.stride, self.pad, self.bias = stride, pad, bias
        self.w = T.Tensor(kaiming_conv(rng, out_c, in_c, k), requires_grad=True)
        self.b = T.Tensor(np.zeros(out_c), requires_grad=True) if bias else None
        self.param_count = out_c * in_c * k * k + (out_c if bias else 0)

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def clone(self):
        dup = object.__new__(ConvOp)
        dup.__dict__ = dict(self.__dict__)
        dup.w = T.Tensor(self.w.data.copy(), requires_grad=True)
        if self.b is not None:
            dup.b = T.Tensor(self.b.data.copy(), requires_grad=True)
        return dup

    def reinit(self, rng):
        self.w.data = kaiming_conv(rng, self.out_c, self.in_c, self.k)
        if self.b is not None:
            self.b.data = np.zeros(self.out_c)

    def __call__(self, x, training=True):
        return T.conv2d(x, self.w, self.b, self.stride, self.pad)


class LinearOp(Op):
    # spatial_out keeps backbone tensors 4-D so linear outputs mix with
    # skip-branch outputs; heads use flat (B, F) outputs instead
    def __init__(self, in_f, out_f, bias, rng, spatial_out=False):
        self.in_f, self.out_f, self.bias = in_f, out_f, bias
        self.spatial_out = spatial_out
        self.w = T.Tensor(rng.normal(0.0, np.sqrt(2.0 / in_f), size=(out_f, in_f)),
                          requires_grad=True)
        self.b = T.Tensor(np.zeros(out_f), requires_grad=True) if bias else None
        self.param_count = out_f * in_f + (out_f if bias else 0)

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def clone(self):
        dup = object.__new__(LinearOp)
        dup.__dict__ = dict(self.__dict__)
        dup.w = T.Tensor(self.w.data.copy(), requires_grad=True)
        if self.b is not None:
            dup.b = T.Tensor(self.b.data.copy(), requires_grad=True)
        return dup

    def reinit(self, rng):
        self.w.data = rng.normal(0.0, np.sqrt(2.0 / self.in_f), size=(self.out_f, self.in_f))
        if self.b is not None:
            self.b.data = np.zeros(self.out_f)

    def __call__(self, x, training=True):
        out = T.linear(x, self.w, self.b)
        if self.spatial_out:
            out = T.reshape(out, (out.shape[0], self.out_f, 1, 1))
        return out


class BatchNormOp(Op):
    def __init__(self, channels, rng=None):
        self.channels = channels
        self.gamma = T.Tensor(np.ones(channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.param_count = 2 * channels

    def parameters(self):
        return [self.gamma, self.beta]

    def clone(self):
        dup = object.__new__(BatchNormOp)
        dup.channels = self.channels
        dup.param_count = self.param_count
        dup.gamma = T.Tensor(self.gamma.data.copy(), requires_grad=True)
        dup.beta = T.Tensor(self.beta.data.copy(), requires_grad=True)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup

    def reinit(self, rng):
        self.gamma.data = np.ones(self.channels)
        self.beta.data = np.zeros(self.channels)
        self.running_mean[:] = 0.0
        self.running_var[:] = 1.0

    def __call__(self, x, training=True):
        return T.batchnorm(x, self.gamma, self.beta,
                           self.running_mean, self.running_var, training=training)


class ReluOp(Op):
    def __call__(self, x, training=True):
        return T.relu(x)


class PoolOp(Op):
    def __init__(self, mode, k, stride, pad=0):
        self.mode, self.k, self.stride, self.pad = mode, k, stride, pad

    def __call__(self, x, training=True):
        if self.mode == "MAX":
            return T.maxpool2d(x, self.k, self.stride, self.pad)
        return T.avgpool2d(x, self.k, self.stride, self.pad)


class EltwiseAddOp(Op):
    def __call__(self, xs, training=True):
        out = xs[0]
        for x in xs[1:]:
            out = out + x
        return out


class ConcatOp(Op):
    def __call__(self, xs, training=True):
        return T.concat(xs, axis=1)


class DropoutOp(Op):
    """Identity at inference, masking during training."""

    def __init__(self, ratio, rng):
        self.ratio = ratio
        self.rng = rng

    def __call__(self, x, training=True):
        return T.dropout(x, self.ratio, self.rng, training=training)


class IdentityOp(Op):
    def __call__(self, x, training=True):
        return x


class SkipOp(Op):
    """Parameter-free skip branch: identity when shapes match, otherwise a
    strided average pool to match spatial size plus channel zero-padding or
    truncation. Raises IncompatibleShapes when no integer stride works."""

    def __init__(self, in_shape, out_shape):
        self.in_shape, self.out_shape = tuple(in_shape), tuple(out_shape)
        ci, hi, wi = self.in_shape
        co, ho, wo = self.out_shape
        if (hi, wi) == (ho, wo):
            self.ratio = 1
        else:
            if ho <= 0 or wo <= 0 or hi % ho or wi % wo or hi // ho != wi // wo:
                raise IncompatibleShapes(f"no integer-stride downsample {self.in_shape} -> {self.out_shape}")
            self.ratio = hi // ho
        self.cin, self.cout = ci, co

    def __call__(self, x, training=True):
        out = x
        if self.ratio > 1:
            out = T.avgpool2d(out, self.ratio, self.ratio)
        if self.cout > self.cin:
            b = out.shape[0]
            zeros = T.Tensor(np.zeros((b, self.cout - self.cin) + out.shape[2:]))
            out = T.concat([out, zeros], axis=1)
        elif self.cout < self.cin:
            out = out[:, :self.cout]
        return out


class HeadOp(Op):
    """Task head: global average pool then a linear projection. Always
    task-specific, never subject to the sharing policy."""

    def __init__(self, in_shape, out_dim, rng):
        c, h, w = in_shape
        self.in_shape = tuple(in_shape)
        self.out_dim = out_dim
        self.pool_k = h
        self.fc = LinearOp(c, out_dim, True, rng)
        self.param_count = self.fc.param_count

    def parameters(self):
        return self.fc.parameters()

    def clone(self):
        dup = object.__new__(HeadOp)
        dup.__dict__ = dict(self.__dict__)
        dup.fc = self.fc.clone()
        return dup

    def reinit(self, rng):
        self.fc.reinit(rng)

    def __call__(self, x, training=True):
        if x.ndim == 4 and x.shape[2] > 1:
            x = T.avgpool2d(x, self.pool_k, self.pool_k)
        return self.fc(x, training=training)


def make_op(node, rng, dropout_rng=None):
    """Instantiate the executable op for a shape-inferred graph node."""
    kind, p = node.kind, node.params
    if kind == "Convolution":
        return ConvOp(node.in_shapes[0][0], p["num_output"], p["kernel_size"],
                      p.get("stride", 1), p.get("pad", 0), p.get("bias_term", True), rng)
    if kind == "InnerProduct":
        c, h, w = node.in_shapes[0]
        return LinearOp(c * h * w, p["num_output"], p.get("bias_term", True), rng,
                        spatial_out=True)
    if kind == "BatchNorm":
        return BatchNormOp(node.in_shapes[0][0])
    if kind == "ReLU":
        return ReluOp()
    if kind == "Pooling":
        return PoolOp(p.get("pool", "MAX"), p["kernel_size"], p.get("stride", 1), p.get("pad", 0))
    if kind == "Eltwise":
        return EltwiseAddOp()
    if kind == "Concat":
        return ConcatOp()
    if kind == "Dropout":
        return DropoutOp(p.get("dropout_ratio", 0.5),
                         dropout_rng if dropout_rng is not None else np.random.default_rng(0))
    raise ValueError(f"no executable op for kind {kind}")
