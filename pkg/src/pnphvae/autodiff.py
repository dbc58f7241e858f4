"""Minimal vectorized reverse-mode differentiation for small dense networks.

Only the operations the toy HVAE needs are provided. Every node stores its
value and a closure mapping the upstream gradient to parent gradients.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor."""
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.value.shape}")
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
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)


def _lift(v) -> Var:
    return v if isinstance(v, Var) else Var(v)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Var) -> Var:
    e = np.exp(a.value)
    return Var(e, (a,), lambda g: (g * e,))


def square(a: Var) -> Var:
    return Var(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def total(a: Var) -> Var:
    return Var(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def clip(a: Var, lo: float, hi: float) -> Var:
    """Clamp with a zero gradient outside ``[lo, hi]``."""
    inside = (a.value >= lo) & (a.value <= hi)
    return Var(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def concat(parts) -> Var:
    """Concatenate 2-D nodes along the column axis."""
    parts = [_lift(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    edges = np.cumsum([p.shape[1] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, edges, axis=1))

    return Var(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)


def index(a: Var, key) -> Var:
    """Basic (slice) indexing; the gradient scatters back into place."""
    def back(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return (out,)

    return Var(a.value[key], (a,), back)
