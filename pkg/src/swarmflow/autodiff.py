"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Node`` wraps a numpy array together with its gradient slot and the
local backward rules that produced it.  Every forward call appends to an
implicit tape (the DAG of ``Node`` objects); ``backward`` walks that tape
once in reverse topological order and *accumulates* vector-Jacobian
products into ``.grad``, so shared subexpressions receive the sum of all
downstream contributions.

Broadcasting is deliberately restricted: for elementwise binary ops one
operand's shape must be a suffix of the other's (leading batch dimensions
only).  Anything fancier is a shape error, not a silent numpy broadcast.

All arithmetic is float64 and single-threaded, so results are bitwise
reproducible for a fixed sequence of operations.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Node", "ShapeMismatchError", "wrap", "backward", "set_finite_checks",
    "add", "sub", "mul", "neg", "matmul", "sigmoid", "tanh", "relu",
    "exp", "log", "reduce_sum", "reduce_mean", "amax", "concat", "take",
]


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform under leading-dim-only broadcasting."""


# Optional finiteness guard: when enabled, any op producing NaN/Inf raises
# immediately instead of letting the poison propagate through the tape.
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Node:
    """One tape entry: a float64 array plus backward bookkeeping.

    Treat ``value`` as immutable once the node exists; downstream nodes
    capture it by reference.
    """

    __slots__ = ("value", "grad", "op", "_parents", "_vjps")

    def __init__(self, value, parents=(), vjps=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._vjps = tuple(vjps)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # Operator sugar; mixed operands are wrapped as constants.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def wrap(x) -> Node:
    """Return ``x`` unchanged if it is a Node, else a constant leaf."""
    if isinstance(x, Node):
        return x
    return Node(x, op="const")


def _node(value, parents, vjps, op) -> Node:
    if _FINITE_CHECKS and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"op {op!r} produced non-finite values")
    return Node(value, parents, vjps, op)


def _check_suffix(sa, sb, op):
    """Shapes conform iff one is a suffix of the other (leading dims only)."""
    k = min(len(sa), len(sb))
    if k and sa[len(sa) - k:] != sb[len(sb) - k:]:
        raise ShapeMismatchError(
            f"{op}: shapes {sa} and {sb} do not conform "
            f"(broadcasting allowed over leading dimensions only)")


def _unbroadcast(g, shape):
    """Sum ``g`` down over the leading dims that were broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    _check_suffix(a.shape, b.shape, "add")
    return _node(a.value + b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    _check_suffix(a.shape, b.shape, "sub")
    return _node(a.value - b.value, (a, b),
                 (lambda g: _unbroadcast(g, a.shape),
                  lambda g: _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    _check_suffix(a.shape, b.shape, "mul")
    return _node(a.value * b.value, (a, b),
                 (lambda g: _unbroadcast(g * b.value, a.shape),
                  lambda g: _unbroadcast(g * a.value, b.shape)), "mul")


def neg(a) -> Node:
    a = wrap(a)
    return _node(-a.value, (a,), (lambda g: -g,), "neg")


# ---------------------------------------------------------------------------
# matrix product (1-D and 2-D operands; no batched matmul)

def matmul(a, b) -> Node:
    a, b = wrap(a), wrap(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeMismatchError(
            f"matmul: expected 1-D/2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree, {av.shape} @ {bv.shape}")

    def vjp_a(g):
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv)
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        return g @ bv.T

    def vjp_b(g):
        if av.ndim == 1 and bv.ndim == 2:
            return np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return av.T @ g
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        return av.T @ g

    return _node(av @ bv, (a, b), (vjp_a, vjp_b), "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops

def sigmoid(a) -> Node:
    a = wrap(a)
    s = expit(a.value)  # numerically stable on both tails
    return _node(s, (a,), (lambda g: g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Node:
    a = wrap(a)
    t = np.tanh(a.value)
    return _node(t, (a,), (lambda g: g * (1.0 - t * t),), "tanh")


def relu(a) -> Node:
    a = wrap(a)
    mask = a.value > 0.0  # subgradient at exactly 0 is taken as 0
    return _node(np.where(mask, a.value, 0.0), (a,),
                 (lambda g: g * mask,), "relu")


def exp(a) -> Node:
    a = wrap(a)
    e = np.exp(a.value)
    return _node(e, (a,), (lambda g: g * e,), "exp")


def log(a) -> Node:
    a = wrap(a)
    v = a.value
    return _node(np.log(v), (a,), (lambda g: g / v,), "log")


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a, axis=None) -> Node:
    a = wrap(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return _node(a.value.sum(axis=axis), (a,), (vjp,), "sum")


def reduce_mean(a, axis=None) -> Node:
    a = wrap(a)
    count = a.value.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy() / count
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy() / count

    return _node(a.value.mean(axis=axis), (a,), (vjp,), "mean")


def amax(a, axis) -> Node:
    """Max over one axis.  Ties route the subgradient to the lowest index."""
    a = wrap(a)
    idx = np.argmax(a.value, axis=axis)  # np.argmax picks the first maximum
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis)
    out = np.squeeze(out, axis=axis)

    def vjp(g):
        z = np.zeros(a.shape)
        np.put_along_axis(z, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis)
        return z

    return _node(out, (a,), (vjp,), "amax")


# ---------------------------------------------------------------------------
# shape ops

def concat(nodes, axis=0) -> Node:
    nodes = [wrap(n) for n in nodes]
    if not nodes:
        raise ValueError("concat: need at least one operand")
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * nodes[i].ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    value = np.concatenate([n.value for n in nodes], axis=axis)
    return _node(value, tuple(nodes),
                 tuple(make_vjp(i) for i in range(len(nodes))), "concat")


def take(a, key) -> Node:
    """Basic indexing/slicing (no repeated indices)."""
    a = wrap(a)
    out = a.value[key]

    def vjp(g):
        z = np.zeros(a.shape)
        z[key] = g
        return z

    return _node(out, (a,), (vjp,), "take")


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every tape ancestor.

    ``loss`` must be scalar (shape ``()``).  Existing ``.grad`` arrays are
    added to, torch-style; callers zero parameter grads between steps.
    """
    if loss.value.shape != ():
        raise ShapeMismatchError(
            f"backward requires a scalar loss, got shape {loss.value.shape}")

    # Iterative post-order DFS: parents are appended before consumers, so the
    # reversed list visits every consumer before the node it feeds.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        if node.grad is None:
            node.grad = np.zeros(node.shape)
    loss.grad = loss.grad + 1.0

    for node in reversed(topo):
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            parent.grad = parent.grad + vjp(g)
