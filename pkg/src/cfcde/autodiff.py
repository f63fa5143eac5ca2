"""Reverse-mode automatic differentiation over numpy arrays.

A Var wraps a float64 ndarray and records how it was produced; backward()
replays the recorded graph exactly once in reverse topological order. Every
operation also accepts plain arrays or scalars for inputs that need no
gradient, and returns a plain ndarray when no Var is involved, so the same
numeric code serves both training and tape-free inference.
"""
from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    """Backward requested on an already-consumed graph."""


class Var:
    __slots__ = ("data", "grad", "_pairs", "_consumed")

    def __init__(self, data, _pairs=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._pairs = _pairs   # ((parent Var, grad_fn), ...)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    # Arithmetic sugar; constants stay off the tape.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def value(x):
    """Underlying ndarray of a Var, or the input coerced to float64."""
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(out, *pairs):
    pairs = tuple((v, fn) for v, fn in pairs if isinstance(v, Var))
    if not pairs:
        return out
    return Var(out, pairs)


def add(a, b):
    av, bv = value(a), value(b)
    return _make(av + bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return _make(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def matmul(a, b):
    av, bv = value(a), value(b)
    return _make(av @ bv,
                 (a, lambda g: g @ bv.T),
                 (b, lambda g: av.T @ g))


def bmv(w, x):
    """Batched matrix-vector product: (B, m, n) x (B, n) -> (B, m)."""
    wv, xv = value(w), value(x)
    out = np.einsum("bmn,bn->bm", wv, xv)
    return _make(out,
                 (w, lambda g: g[:, :, None] * xv[:, None, :]),
                 (x, lambda g: np.einsum("bmn,bm->bn", wv, g)))


def reshape(a, shape):
    av = value(a)
    return _make(av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def relu(a):
    av = value(a)
    mask = av > 0.0
    return _make(np.where(mask, av, 0.0), (a, lambda g: g * mask))


def tanh(a):
    out = np.tanh(value(a))
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def exp(a):
    out = np.exp(value(a))
    return _make(out, (a, lambda g: g * out))


def log(a):
    av = value(a)
    return _make(np.log(av), (a, lambda g: g / av))


def softmax(a):
    av = value(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (a, lambda g: p * (g - (g * p).sum(axis=-1, keepdims=True))))


def clamp_min(a, floor):
    av = value(a)
    mask = av > floor
    return _make(np.maximum(av, floor), (a, lambda g: g * mask))


def sum_(a):
    av = value(a)
    return _make(np.asarray(av.sum()), (a, lambda g: np.broadcast_to(g, av.shape)))


def mean_(a):
    av = value(a)
    n = av.size
    return _make(np.asarray(av.mean()),
                 (a, lambda g: np.broadcast_to(g / n, av.shape)))


def take_rows(a, idx):
    av = value(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _make(av[idx], (a, back))


def stack_rows(items):
    """Stack equal-shape values along a new leading axis."""
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=0)
    pairs = [(x, (lambda i: lambda g: g[i])(i)) for i, x in enumerate(items)]
    return _make(out, *pairs)


def reverse_gradient(a, scale):
    """Identity forward; backward multiplies the gradient by -scale."""
    av = value(a)
    return _make(av.copy(), (a, lambda g: g * (-scale)))


def backward(root: Var, seed=None):
    """Accumulate gradients of `root` into every reachable Var's .grad."""
    if not isinstance(root, Var):
        raise TypeError("backward needs a Var root")
    if root._consumed:
        raise TapeError("this graph was already differentiated")

    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._pairs:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, fn in node._pairs:
            contrib = fn(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + contrib
    root._consumed = True
