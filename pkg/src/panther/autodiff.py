"""Reverse-mode autodiff over dense numpy tensors.

The op catalog is exactly what the network needs: matmul, broadcasting
elementwise arithmetic, softmax / log-softmax / logsumexp, layer norm,
embedding gather, causal depthwise dilated convolution, concatenation,
reductions, pairwise Euclidean distance, and the two loss heads. Graphs
are built eagerly micrograd-style: each result carries its parents and a
closure that pushes gradients to them; `backward()` runs the closures in
reverse topological order, visiting each node once.

Training runs in float32; gradient-check tests build the same graphs in
float64 by passing dtype explicitly.
"""

import numpy as np

from . import flops, kernels

_grad_enabled = True
check_finite = False


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        out = Tensor(self.data)
        return out

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return mul(sub(self, other), -1.0)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _finish(out, parents, backward):
    """Attach autodiff bookkeeping to a freshly computed node."""
    if check_finite and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in forward op")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_const(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def add(a, b):
    b = _as_const(b, a)
    out = Tensor(a.data + b.data)
    flops.add(out.size)

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _finish(out, (a, b), backward)


def sub(a, b):
    b = _as_const(b, a)
    out = Tensor(a.data - b.data)
    flops.add(out.size)

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _finish(out, (a, b), backward)


def mul(a, b):
    b = _as_const(b, a)
    out = Tensor(a.data * b.data)
    flops.add(out.size)

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _finish(out, (a, b), backward)


def matmul(a, b):
    """a @ b for a [..., n, k] with b either [k, m] or batched like a."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if b.ndim != 2 and b.ndim != a.ndim:
        raise ValueError("matmul rhs must be 2-D or match lhs batch dims")
    out = Tensor(np.matmul(a.data, b.data))
    flops.add(2 * out.size * a.shape[-1])

    def backward():
        g = out.grad
        if b.ndim == 2:
            _accum(a, np.matmul(g, b.data.T))
            k = a.shape[-1]
            _accum(b, np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1])))
        else:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _finish(out, (a, b), backward)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def backward():
        _accum(a, out.grad.reshape(a.shape))

    return _finish(out, (a,), backward)


def transpose(a, axes):
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def backward():
        _accum(a, np.transpose(out.grad, inv))

    return _finish(out, (a,), backward)


def narrow(a, idx):
    """Basic (slice/int) indexing with gradient scatter."""
    out = Tensor(a.data[idx])

    def backward():
        g = np.zeros_like(a.data)
        g[idx] += out.grad
        _accum(a, g)

    return _finish(out, (a,), backward)


def concat(parts, axis):
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def backward():
        start = 0
        for p, n in zip(parts, sizes):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + n)
            _accum(p, out.grad[tuple(sl)])
            start += n

    return _finish(out, tuple(parts), backward)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    flops.add(a.size)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _finish(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis):
    """Max over one axis; gradient routes to the first argmax per slice."""
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis))
    flops.add(a.size)

    def backward():
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis)
        _accum(a, g)

    return _finish(out, (a,), backward)


def relu(a):
    out = Tensor(np.maximum(a.data, 0))
    flops.add(a.size)

    def backward():
        _accum(a, out.grad * (a.data > 0))

    return _finish(out, (a,), backward)


def exp(a):
    out = Tensor(np.exp(a.data))
    flops.add(a.size)

    def backward():
        _accum(a, out.grad * out.data)

    return _finish(out, (a,), backward)


def log(a):
    out = Tensor(np.log(a.data))
    flops.add(a.size)

    def backward():
        _accum(a, out.grad / a.data)

    return _finish(out, (a,), backward)


def sigmoid(a):
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    flops.add(3 * a.size)

    def backward():
        _accum(a, out.grad * out.data * (1.0 - out.data))

    return _finish(out, (a,), backward)


def softmax(a, axis=-1):
    """Softmax along `axis`; rows sum to one, shift-invariant."""
    x = np.moveaxis(a.data, axis, -1)
    y2 = kernels.softmax_rows(np.ascontiguousarray(x.reshape(-1, x.shape[-1])))
    y = np.moveaxis(y2.reshape(x.shape), -1, axis)
    out = Tensor(y)
    flops.add(5 * a.size)

    def backward():
        g = out.grad
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * out.data)

    return _finish(out, (a,), backward)


def log_softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    flops.add(5 * a.size)

    def backward():
        g = out.grad
        _accum(a, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    return _finish(out, (a,), backward)


def logsumexp(a, axis=-1, keepdims=False):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    res = np.log(s) + m
    out = Tensor(res if keepdims else res.squeeze(axis))
    flops.add(4 * a.size)
    soft = e / s

    def backward():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, soft * g)

    return _finish(out, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0 / var 1, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    flops.add(8 * x.size)

    def backward():
        g = out.grad
        _accum(gain, _unbroadcast(g * xhat, gain.shape))
        _accum(bias, _unbroadcast(g, bias.shape))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _finish(out, (x, gain, bias), backward)


def embedding(table, ids):
    """Gather rows of `table` ([V, d]) by an integer id array."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def backward():
        g = np.zeros_like(table.data)
        d = table.shape[-1]
        kernels.scatter_add_rows(
            g, np.ascontiguousarray(ids.ravel().astype(np.int64)),
            np.ascontiguousarray(out.grad.reshape(-1, d)),
        )
        _accum(table, g)

    return _finish(out, (table,), backward)


def conv1d_depthwise(x, kern, dilation=1):
    """Causal depthwise dilated 1-D convolution.

    x: [T, C] or [B, T, C]; kern: [w, C]. Output position t reads only
    inputs at positions <= t (zero left padding of (w-1)*dilation).
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.shape[-1] != kern.shape[-1]:
        raise ValueError(
            f"channel mismatch: input has {xd.shape[-1]}, kernel has {kern.shape[-1]}"
        )
    xd = np.ascontiguousarray(xd)
    kd = np.ascontiguousarray(kern.data)
    y = kernels.conv1d_depthwise_fwd(xd, kd, dilation)
    out = Tensor(y[0] if squeeze else y)
    B, T, C = xd.shape
    flops.add(2 * B * T * kern.shape[0] * C)

    def backward():
        gy = out.grad[None] if squeeze else out.grad
        gx, gk = kernels.conv1d_depthwise_bwd(xd, kd, dilation, np.ascontiguousarray(gy))
        _accum(x, gx[0] if squeeze else gx)
        _accum(kern, gk)

    return _finish(out, (x, kern), backward)


def pairwise_distance(e):
    """All-pairs Euclidean distances of the rows of e ([B, d] -> [B, B])."""
    diff = e.data[:, None, :] - e.data[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    d = np.sqrt(np.maximum(sq, 0.0))
    out = Tensor(d)
    flops.add(3 * e.shape[0] * e.shape[0] * e.shape[1])
    safe = np.where(d > 1e-12, d, 1.0)

    def backward():
        g = out.grad
        w = (g + g.T) / safe
        np.fill_diagonal(w, 0.0)
        _accum(e, w.sum(axis=1, keepdims=True) * e.data - w @ e.data)

    return _finish(out, (e,), backward)


def take_along_last(a, idx):
    """Pick one entry per row along the last axis: out[...] = a[..., idx[...]]."""
    idx = np.asarray(idx)
    out = Tensor(np.take_along_axis(a.data, idx[..., None], -1).squeeze(-1))

    def backward():
        g = np.zeros_like(a.data)
        np.put_along_axis(g, idx[..., None], out.grad[..., None], -1)
        _accum(a, g)

    return _finish(out, (a,), backward)


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood of `targets` under row-softmax logits.

    targets: integer array shaped like logits minus the last axis. mask, if
    given, is a float array of the same shape; positions with mask 0 are
    excluded and the mean runs over mask weight.
    """
    ls = log_softmax(logits, axis=-1)
    picked = take_along_last(ls, targets)
    if mask is None:
        return mul(tmean(picked), -1.0)
    w = float(np.sum(mask))
    if w <= 0:
        raise ValueError("cross_entropy mask selects no positions")
    weighted = mul(picked, Tensor(np.asarray(mask, dtype=logits.dtype)))
    return mul(tsum(weighted), -1.0 / w)


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy on raw scores, numerically stable."""
    x = logits.data
    y = np.asarray(labels, dtype=x.dtype)
    val = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.array(val.mean(), dtype=x.dtype))
    flops.add(6 * logits.size)

    def backward():
        s = 1.0 / (1.0 + np.exp(-x))
        _accum(logits, out.grad * (s - y) / x.size)

    return _finish(out, (logits,), backward)
