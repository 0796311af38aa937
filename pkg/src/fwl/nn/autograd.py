"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op builds a :class:`Tensor` holding its parents and a closure that maps
the upstream gradient to parent gradients.  ``Tensor.backward`` walks the
graph in reverse topological order; accumulation order is fixed by graph
construction, so repeated runs are bit-identical.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # operator sugar
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent; ``a`` must be positive for non-integer exponents."""
    a = as_tensor(a)
    out = a.data ** exponent
    if exponent == 0:
        return _make(out, (a,), lambda g: (np.zeros_like(a.data),))
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, clamp: float = 0.0) -> Tensor:
    """Natural log; with ``clamp > 0`` inputs below ``clamp`` are raised to it (zero gradient there)."""
    a = as_tensor(a)
    x = np.maximum(a.data, clamp) if clamp > 0 else a.data
    live = a.data >= clamp if clamp > 0 else np.ones(a.shape, bool)
    return _make(np.log(x), (a,), lambda g: (np.where(live, g / x, 0.0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _make(np.where(m, a.data, 0.0), (a,), lambda g: (g * m,))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * sig,))


def dropout(a, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    a = as_tensor(a)
    if not training or p <= 0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# -- reductions and shape ---------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, key) -> Tensor:
    """Basic (non-repeating) indexing; gradient is scattered back into zeros."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)
    return _make(a.data[key], (a,), bw)


def take_along(a, idx: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with gradient; ``idx`` has size 1 along ``axis``."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)
    return _make(np.take_along_axis(a.data, idx, axis=axis), (a,), bw)


def gather_rows(a, idx: np.ndarray) -> Tensor:
    """``(B, N, D)`` -> ``(B, n, D)`` rows picked per batch element by ``idx`` ``(B, n)``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(a.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (b, idx), g)
        return (full,)
    return _make(a.data[b, idx], (a,), bw)


def scatter_rows(a, idx: np.ndarray, n_rows: int) -> Tensor:
    """Inverse of :func:`gather_rows`: place ``(B, n, D)`` rows at ``idx`` in a zero ``(B, n_rows, D)``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if np.any(np.diff(np.sort(idx, axis=1), axis=1) == 0):
        raise ValueError("scatter indices overlap")
    b = np.arange(a.shape[0])[:, None]
    out = np.zeros((a.shape[0], n_rows) + a.shape[2:])
    out[b, idx] = a.data
    return _make(out, (a,), lambda g: (g[b, idx],))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        d = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)
    return _make(out, (x, gamma, beta), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def softmax_attention(q, k, v, scale: float | None = None) -> Tensor:
    """``softmax(q k^T * scale) v`` over the last two axes, as one fused op."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    logits -= logits.max(-1, keepdims=True)
    e = np.exp(logits)
    A = e / e.sum(-1, keepdims=True)
    out = A @ v.data

    def bw(g):
        gv = np.swapaxes(A, -1, -2) @ g
        gA = g @ np.swapaxes(v.data, -1, -2)
        gs = A * (gA - (gA * A).sum(-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv
    return _make(out, (q, k, v), bw)


def patchify(x, patch) -> Tensor:
    """``(B, H, W, T)`` -> ``(B, N, Hp*Wp*Tp)`` non-overlapping tubes, patches row-major over (h, w, t).

    Followed by a matmul this is a 3D convolution with kernel == stride == patch.
    """
    x = as_tensor(x)
    B, H, W, T = x.shape
    ph, pw, pt = patch
    if H % ph or W % pw or T % pt:
        raise ValueError(f"volume {(H, W, T)} not divisible by patch {patch}")
    shp = (B, H // ph, ph, W // pw, pw, T // pt, pt)
    axes = (0, 1, 3, 5, 2, 4, 6)
    n = (H // ph) * (W // pw) * (T // pt)
    out = np.transpose(x.data.reshape(shp), axes).reshape(B, n, ph * pw * pt)

    def bw(g):
        g = g.reshape((B, H // ph, W // pw, T // pt, ph, pw, pt))
        return (np.transpose(g, np.argsort(axes)).reshape(x.shape),)
    return _make(out, (x,), bw)


def unpatchify(x, patch, dims, channels: int = 0) -> Tensor:
    """Inverse of :func:`patchify`; with ``channels > 0`` the last axis holds ``P * channels``."""
    x = as_tensor(x)
    B = x.shape[0]
    H, W, T = dims
    ph, pw, pt = patch
    c = max(channels, 1)
    g_shape = (B, H // ph, W // pw, T // pt, ph, pw, pt, c)
    axes = (0, 1, 4, 2, 5, 3, 6, 7)
    out_shape = (B, H, W, T, c) if channels else (B, H, W, T)
    out = np.transpose(x.data.reshape(g_shape), axes).reshape(out_shape)

    def bw(g):
        g = g.reshape((B, H // ph, ph, W // pw, pw, T // pt, pt, c))
        return (np.transpose(g, np.argsort(axes)).reshape(x.shape),)
    return _make(out, (x,), bw)
