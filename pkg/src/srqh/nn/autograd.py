"""Tape-free reverse-mode autodiff over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
that accumulates gradients into them.  ``backward`` walks the graph in
reverse topological order.  Everything runs in float64.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit, ndtr

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order, seen = [], set()
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
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        parents = tuple(p for p in parents if p.requires_grad)
        if parents:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def matmul(x, w) -> Tensor:
    """``x (..., a) @ w (a, b)``."""
    x, w = as_tensor(x), as_tensor(w)

    def bw(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            a = x.data.shape[-1]
            w._accum(x.data.reshape(-1, a).T @ g.reshape(-1, g.shape[-1]))

    return _make(x.data @ w.data, (x, w), bw)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        x._accum(g * mask)

    return _make(x.data * mask, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)

    def bw(g):
        x._accum(g * s * (1 - s))

    return _make(s, (x,), bw)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data)

    def bw(g):
        x._accum(g * expit(x.data))

    return _make(y, (x,), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def bw(g):
        x._accum(g * y)

    return _make(y, (x,), bw)


def log(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accum(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), 1.0 / max(n, 1))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_cols(x, lo, hi) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., lo:hi] = g
        x._accum(full)

    return _make(x.data[..., lo:hi], (x,), bw)


def take_rows(x, idx) -> Tensor:
    """``x[idx]`` for an integer index array of any shape."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *x.shape[1:]))
        x._accum(full)

    return _make(x.data[idx], (x,), bw)


def broadcast_rows(x, n: int) -> Tensor:
    """Repeat a ``(C,)`` vector into ``(n, C)``."""
    x = as_tensor(x)

    def bw(g):
        x._accum(g.sum(0).reshape(x.shape))

    return _make(np.broadcast_to(x.data.reshape(1, -1), (n, x.data.size)).copy(), (x,), bw)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def bw(g):
        x._accum(g - s * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), bw)


def ste_round(x) -> Tensor:
    """Round half away from zero forward, identity gradient backward."""
    x = as_tensor(x)
    y = np.sign(x.data) * np.floor(np.abs(x.data) + 0.5)

    def bw(g):
        x._accum(g)

    return _make(y, (x,), bw)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ----------------------------------------------------------------- sparse ops
def sparse_conv_op(x, w, kmap, n_out: int) -> Tensor:
    """Gather-matmul-scatter convolution.

    ``w`` has shape ``(K, Cin, Cout)``; ``kmap`` lists ``(k, in_idx, out_idx)``
    with unique indices per tap.
    """
    x, w = as_tensor(x), as_tensor(w)
    out = np.zeros((n_out, w.shape[2]))
    for k, i_in, i_out in kmap:
        out[i_out] += x.data[i_in] @ w.data[k]

    def bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for k, i_in, i_out in kmap:
                gx[i_in] += g[i_out] @ w.data[k].T
            x._accum(gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for k, i_in, i_out in kmap:
                gw[k] = x.data[i_in].T @ g[i_out]
            w._accum(gw)

    return _make(out, (x, w), bw)


def expand_children_op(x, w, perm) -> Tensor:
    """Transposed stride-2 convolution onto the 8 children of each input.

    ``w`` is ``(8, Cin, Cout)``; row ``8*n + o`` of the raw output is child
    ``o`` of input ``n``; ``perm`` reorders raw rows into sorted child order.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, cin = x.shape
    cout = w.shape[2]
    wf = w.data.transpose(1, 0, 2).reshape(cin, 8 * cout)
    raw = (x.data @ wf).reshape(n * 8, cout)

    def bw(g):
        graw = np.empty_like(raw)
        graw[perm] = g
        graw = graw.reshape(n, 8 * cout)
        if x.requires_grad:
            x._accum(graw @ wf.T)
        if w.requires_grad:
            gwf = x.data.T @ graw
            w._accum(gwf.reshape(cin, 8, cout).transpose(1, 0, 2))

    return _make(raw[perm], (x, w), bw)


# ----------------------------------------------------------------- losses
_LN2 = np.log(2.0)
_LIKELIHOOD_BOUND = 1e-9


def gaussian_bits_op(y, mu, sigma) -> Tensor:
    """Elementwise ``-log2 P`` of a unit bin centred on ``y`` under N(mu, sigma).

    Uses the mirrored tail form so the difference of CDFs stays accurate far
    from the mean.  Likelihoods are floored at 1e-9 (zero gradient below).
    """
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    d = np.abs(y.data - mu.data)
    sg = np.sign(y.data - mu.data)
    s = sigma.data
    u = (0.5 - d) / s
    l = (-0.5 - d) / s
    p = ndtr(u) - ndtr(l)
    floor = p < _LIKELIHOOD_BOUND
    p = np.maximum(p, _LIKELIHOOD_BOUND)
    bits = -np.log(p) / _LN2

    def bw(g):
        phi_u = np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi)
        phi_l = np.exp(-0.5 * l * l) / np.sqrt(2 * np.pi)
        coef = np.where(floor, 0.0, -g / (p * _LN2))
        dd = (-phi_u + phi_l) / s  # dP/dd
        ds = (-phi_u * u + phi_l * l) / s  # dP/dsigma
        gd = coef * dd * sg
        if y.requires_grad:
            y._accum(_unbroadcast(gd, y.shape))
        if mu.requires_grad:
            mu._accum(_unbroadcast(-gd, mu.shape))
        if sigma.requires_grad:
            sigma._accum(_unbroadcast(coef * ds, sigma.shape))

    return _make(bits, (y, mu, sigma), bw)


def focal_loss_op(p, labels, alpha: float = 0.75, gamma: float = 2.0, eps: float = 1e-6) -> Tensor:
    """Mean focal loss of probabilities ``p`` against binary ``labels``."""
    p = as_tensor(p)
    t = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    pc = np.clip(p.data, eps, 1 - eps)
    inside = (p.data >= eps) & (p.data <= 1 - eps)
    pt = np.where(t > 0, pc, 1 - pc)
    at = np.where(t > 0, alpha, 1 - alpha)
    n = max(pc.size, 1)
    one_m = 1 - pt
    loss = -at * one_m ** gamma * np.log(pt)

    def bw(g):
        # d/dpt of -(1-pt)^g log pt
        dpt = at * (gamma * one_m ** (gamma - 1) * np.log(pt) - one_m ** gamma / pt) if gamma > 0 else -at / pt
        dp = np.where(t > 0, dpt, -dpt) * inside
        p._accum(g * dp / n)

    return _make(loss.sum() / n, (p,), bw)


def bce_bits_op(p, labels, eps: float = 1e-6) -> Tensor:
    """Total binary cross-entropy in bits."""
    p = as_tensor(p)
    t = np.asarray(labels, dtype=np.float64).reshape(p.shape)
    pc = np.clip(p.data, eps, 1 - eps)
    inside = (p.data >= eps) & (p.data <= 1 - eps)
    bits = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)) / _LN2

    def bw(g):
        p._accum(g * inside * (-(t / pc) + (1 - t) / (1 - pc)) / _LN2)

    return _make(bits.sum(), (p,), bw)
