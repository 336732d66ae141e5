"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Value` records the op that produced it; :func:`backward` walks
the recorded graph in reverse topological order. Graphs are rebuilt for
every evaluation, so there is no explicit tape object to manage.

Values built only from constants carry no parents, which keeps evaluation
without gradients cheap.
"""

from __future__ import annotations

import numpy as np

from . import _kernels

LOG_2PI = float(np.log(2.0 * np.pi))


class Value:
    __array_priority__ = 1000

    def __init__(self, data, parents=(), backward=None, requires_grad=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = bool(requires_grad)
        # constant subgraphs do not need to be remembered
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self._backpropagated = False

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)


def constant(x) -> Value:
    return Value(x, requires_grad=False)


def parameter(x, name=None) -> Value:
    return Value(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


def _accum(node: Value, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True).reshape(node.shape)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _toposort(root: Value) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Value) -> None:
    """Populate ``.grad`` of every node reachable from the scalar ``root``.

    Leaf gradients accumulate across calls until they are reset; calling
    this twice on the same graph is an error (see :func:`reset_graph`).
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root._backpropagated:
        raise RuntimeError("backward() already ran on this graph; call reset_graph() first")
    order = _toposort(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    root._backpropagated = True


def reset_graph(root: Value) -> None:
    """Clear every gradient in the graph of ``root`` so it can be backpropagated again."""
    for node in _toposort(root):
        node.grad = None
    root._backpropagated = False


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Value(a.data + b.data, (a, b), bw)


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return Value(a.data - b.data, (a, b), bw)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return Value(a.data * b.data, (a, b), bw)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return Value(out, (a, b), bw)


def neg(a) -> Value:
    a = as_value(a)
    return Value(-a.data, (a,), lambda g: _accum(a, -g))


def power(a, exponent: float) -> Value:
    a = as_value(a)
    p = float(exponent)
    return Value(a.data ** p, (a,), lambda g: _accum(a, g * p * a.data ** (p - 1.0)))


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Value(a.data @ b.data, (a, b), bw)


# -- elementwise --------------------------------------------------------------

def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return Value(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Value:
    a = as_value(a)
    return Value(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def square(a) -> Value:
    a = as_value(a)
    return Value(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * g * a.data))


def sqrt(a) -> Value:
    a = as_value(a)
    out = np.sqrt(a.data)
    return Value(out, (a,), lambda g: _accum(a, 0.5 * g / out))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # linear above 30, exp below -30: both exact to double precision there
    mid = np.clip(x, -30.0, 30.0)
    low = np.exp(np.minimum(x, -30.0))
    return np.where(x > 30.0, x, np.where(x < -30.0, low, np.log1p(np.exp(mid))))


def relu(a) -> Value:
    a = as_value(a)
    mask = a.data > 0
    return Value(np.where(mask, a.data, 0.0), (a,), lambda g: _accum(a, g * mask))


def softplus(a) -> Value:
    a = as_value(a)
    return Value(_softplus(a.data), (a,), lambda g: _accum(a, g * _sigmoid(a.data)))


def sigmoid(a) -> Value:
    a = as_value(a)
    out = _sigmoid(a.data)
    return Value(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return Value(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def clip(a, lo: float, hi: float) -> Value:
    a = as_value(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return Value(np.clip(a.data, lo, hi), (a,), lambda g: _accum(a, g * mask))


# -- reductions and shape ops -------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Value:  # noqa: A001 - mirrors numpy
    a = as_value(a)
    return Value(np.sum(a.data, axis=axis, keepdims=keepdims), (a,),
                 lambda g: _accum(a, _expand(g, a.shape, axis, keepdims)))


def mean(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Value:
    a = as_value(a)
    return Value(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def concat(values, axis=-1) -> Value:
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        for v, piece in zip(values, np.split(g, splits, axis=axis)):
            _accum(v, piece)

    return Value(out, values, bw)


def logsumexp(a, axis=None, keepdims=False) -> Value:
    a = as_value(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out = lse if keepdims else (np.squeeze(lse, axis=axis) if axis is not None else lse.reshape(()))

    def bw(g):
        _accum(a, _expand(g, a.shape, axis, keepdims) * np.exp(a.data - lse))

    return Value(out, (a,), bw)


def softmax(a, axis=-1) -> Value:
    a = as_value(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        _accum(a, out * (g - np.sum(g * out, axis=axis, keepdims=True)))

    return Value(out, (a,), bw)


def log_softmax(a, axis=-1) -> Value:
    a = as_value(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True)) + m
    out = a.data - lse

    def bw(g):
        _accum(a, g - np.exp(out) * np.sum(g, axis=axis, keepdims=True))

    return Value(out, (a,), bw)


# -- fused Gaussian kernel -------------------------------------------------------

def pairwise_log_overlap(mu_a, var_a, mu_b, var_b) -> Value:
    """Differentiable ``log N(mu_a[i] | mu_b[j], diag(var_a[i] + var_b[j]))``.

    Shapes ``(N, D)`` and ``(M, D)`` in, ``(N, M)`` out. Passing zero
    variances for ``a`` gives the log density of points ``mu_a`` under each
    Gaussian of ``b``.
    """
    mu_a, var_a, mu_b, var_b = (as_value(v) for v in (mu_a, var_a, mu_b, var_b))
    out = _kernels.pairwise_log_overlap(mu_a.data, var_a.data, mu_b.data, var_b.data)
    args = (mu_a, var_a, mu_b, var_b)

    def bw(g):
        grads = _kernels.pairwise_log_overlap_grad(mu_a.data, var_a.data, mu_b.data, var_b.data, g)
        for node, gr in zip(args, grads):
            _accum(node, gr)

    return Value(out, args, bw)


def diag_gaussian_log_density(x, mean, logvar) -> Value:
    """Row-wise ``log N(x | mean, diag(exp(logvar)))`` summed over the last axis."""
    x, mean, logvar = as_value(x), as_value(mean), as_value(logvar)
    sq = square(x - mean) * exp(-logvar)
    return -0.5 * sum(LOG_2PI + logvar + sq, axis=-1)
