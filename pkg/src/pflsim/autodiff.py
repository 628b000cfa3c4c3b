"""Tiny reverse-mode autodiff over float64 numpy arrays.

Graphs are built eagerly: every op on a :class:`Tensor` records its parents
and a local backward rule. :func:`backward` walks the graph once from a scalar
and returns gradients for every leaf created with ``requires_grad=True``.

A graph may be differentiated only once. After :func:`backward` the graph is
released and a second call on the same output raises :class:`TapeError`.
"""

import math

import numpy as np


class TapeError(RuntimeError):
    pass


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), bw)


def relu(a):
    on = a.data > 0.0
    return _node(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def tsum(a):
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def softmax_cross_entropy(logits, labels):
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = _wrap(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _node(np.array(loss), (logits,), bw)


def backward(loss):
    """Return ``{leaf: gradient}`` for every requires_grad leaf under ``loss``.

    Leaves also receive the gradient in their ``.grad`` attribute.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise TapeError("backward needs a scalar Tensor")
    if loss._consumed:
        raise TapeError("graph already differentiated")
    if not loss.requires_grad:
        raise TapeError("loss is detached from every parameter leaf")

    order = []
    seen = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None
        node._consumed = True
    loss._consumed = True
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = float(f(x))
        x[i] = old - eps
        fm = float(f(x))
        x[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return g
