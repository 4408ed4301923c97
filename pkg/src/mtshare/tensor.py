"""Minimal reverse-mode autodiff over dense numpy arrays.

Double precision by default (switchable via set_default_dtype). Every
primitive records a backward closure; Tensor.backward() walks the tape in
reverse topological order. Desk-scale performance only: convolutions are
lowered to im2col matmuls.
"""

import numpy as np

from .errors import LabelOutOfRange, ShapeMismatch

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _unbroadcast(grad, shape):
    # reduce a broadcasted gradient back to `shape`
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for t in reversed(topo):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # ---- operator sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---- elementwise / structural primitives ----


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _make(out_data, (a, b), bw)


def power(a, p):
    a = _as_tensor(a)
    out_data = a.data ** p

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), bw)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), bw)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bw)


def clamp_min(a, lo):
    """Elementwise max(a, lo); gradient passes only where not clamped."""
    a = _as_tensor(a)
    mask = a.data > lo
    out_data = np.where(mask, a.data, lo)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), bw)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    out_data = a.data * mask

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), bw)


def softplus(a):
    a = _as_tensor(a)
    # stable ln(1+e^x)
    out_data = np.logaddexp(0.0, a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + np.exp(-a.data)))

    return _make(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), bw)


def getitem(a, idx):
    a = _as_tensor(a)
    out_data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return _make(out_data, (a,), bw)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _make(out_data, (a, b), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + s)
                t._accumulate(g[tuple(sl)])
            offset += s

    return _make(out_data, tuple(tensors), bw)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), bw)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    s = np.exp(out_data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g - s * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), bw)


# ---- spatial primitives ----


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    # x: (B, C, H, W) -> (B, C*k*k, OH*OW)
    b, c, h, w = x.shape
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatch("conv/pool", f"non-positive output size for input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, OH, OW, k, k)
    col = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, oh * ow)
    return np.ascontiguousarray(col), oh, ow


def _col2im(dcol, x_shape, k, stride, pad, oh, ow):
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    dcol = dcol.reshape(b, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcol[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d(x, w, b=None, stride=1, pad=0):
    """x: (B,C,H,W), w: (O,C,k,k), b: (O,) or None."""
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    bs, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ShapeMismatch("conv2d", f"weight {w.shape} incompatible with input {x.shape}")
    col, oh, ow = _im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(o, c * k * k)
    out_data = np.einsum("of,bfp->bop", wmat, col).reshape(bs, o, oh, ow)
    if b is not None:
        out_data = out_data + b.data.reshape(1, o, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.reshape(bs, o, oh * ow)
        if w.requires_grad:
            dw = np.einsum("bop,bfp->of", gmat, col).reshape(w.shape)
            w._accumulate(dw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcol = np.einsum("of,bop->bfp", wmat, gmat)
            x._accumulate(_col2im(dcol, x.shape, k, stride, pad, oh, ow))

    return _make(out_data, parents, bw)


def maxpool2d(x, k, stride=None, pad=0):
    x = _as_tensor(x)
    stride = stride or k
    bs, c, h, w = x.shape
    col, oh, ow = _im2col(x.data.reshape(bs * c, 1, h, w), k, stride, pad)
    col = col.reshape(bs * c, k * k, oh * ow)
    arg = col.argmax(axis=1)  # (B*C, OH*OW)
    out_data = np.take_along_axis(col, arg[:, None, :], axis=1).reshape(bs, c, oh, ow)

    def bw(g):
        if not x.requires_grad:
            return
        dcol = np.zeros((bs * c, k * k, oh * ow), dtype=g.dtype)
        np.put_along_axis(dcol, arg[:, None, :], g.reshape(bs * c, 1, oh * ow), axis=1)
        dx = _col2im(dcol.reshape(bs * c, k * k, oh * ow), (bs * c, 1, h, w), k, stride, pad, oh, ow)
        x._accumulate(dx.reshape(x.shape))

    return _make(out_data, (x,), bw)


def avgpool2d(x, k, stride=None, pad=0):
    x = _as_tensor(x)
    stride = stride or k
    bs, c, h, w = x.shape
    col, oh, ow = _im2col(x.data.reshape(bs * c, 1, h, w), k, stride, pad)
    out_data = col.mean(axis=1).reshape(bs, c, oh, ow)

    def bw(g):
        if not x.requires_grad:
            return
        dcol = np.broadcast_to(g.reshape(bs * c, 1, oh * ow) / (k * k),
                               (bs * c, k * k, oh * ow)).copy()
        dx = _col2im(dcol, (bs * c, 1, h, w), k, stride, pad, oh, ow)
        x._accumulate(dx.reshape(x.shape))

    return _make(out_data, (x,), bw)


def linear(x, w, b=None):
    """x: (B, F_in) or any (B, ...) flattened; w: (F_out, F_in)."""
    x = _as_tensor(x)
    if x.ndim > 2:
        x = reshape(x, (x.shape[0], -1))
    out = matmul(x, transpose2d(w))
    if b is not None:
        out = out + b
    return out


def transpose2d(a):
    a = _as_tensor(a)
    out_data = a.data.T

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(out_data, (a,), bw)


def dropout(x, p, rng, training=True):
    x = _as_tensor(x)
    if not training or p <= 0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make(x.data * mask, (x,), bw)


def batchnorm(x, gamma, beta, running_mean, running_var, training=True,
              momentum=0.1, eps=1e-5):
    """Channel batchnorm over (B,C,H,W). running_* are plain numpy arrays,
    updated in place during training forwards."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[1]
    gshape = (1, c, 1, 1)
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        var = tmean((x - mu) ** 2, axis=(0, 2, 3), keepdims=True)
        running_mean *= (1 - momentum)
        running_mean += momentum * mu.data.reshape(c)
        running_var *= (1 - momentum)
        running_var += momentum * var.data.reshape(c)
        xhat = (x - mu) / sqrt(var + eps)
    else:
        mu = running_mean.reshape(gshape)
        var = running_var.reshape(gshape)
        xhat = (x - mu) * (1.0 / np.sqrt(var + eps))
    return reshape(gamma, gshape) * xhat + reshape(beta, gshape)


# ---- losses ----


def cross_entropy(logits, labels):
    """Mean NLL over a batch. logits: (B,K), labels: int array (B,)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    bs, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise LabelOutOfRange(f"labels must be in [0, {k})")
    lsm = log_softmax(logits, axis=1)
    picked = getitem(lsm, (np.arange(bs), labels))
    return -tmean(picked)


def l1_loss(pred, target):
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    diff = pred.data - target.data
    sign = np.sign(diff)
    n = pred.data.size

    def bw(g):
        if pred.requires_grad:
            pred._accumulate(g * sign / n)
        if target.requires_grad:
            target._accumulate(-g * sign / n)

    return _make(np.abs(diff).mean(), (pred, target), bw)


def cosine_inverse_loss(pred, target, eps=1e-12):
    """Mean of (1 - cosine similarity) per row. pred/target: (B, D)."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.ndim > 2:
        pred = reshape(pred, (pred.shape[0], -1))
    if target.ndim > 2:
        target = reshape(target, (target.shape[0], -1))
    dot = tsum(pred * target, axis=1)
    pn = sqrt(tsum(pred * pred, axis=1) + eps)
    tn = sqrt(tsum(target * target, axis=1) + eps)
    cos = dot / (pn * tn)
    return tmean(1.0 - cos)


# ---- random ----


def gumbel_noise(shape, rng):
    """Standard Gumbel(0,1) samples: -ln(-ln U), U clamped off {0,1}."""
    tiny = np.finfo(np.float64).tiny
    u = np.clip(rng.random(shape), tiny, 1.0 - 1e-16)
    return Tensor(-np.log(-np.log(u)))
