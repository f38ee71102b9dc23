"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Tensors are numpy float32 arrays on the reference path (float64 graphs are
supported so test oracles can run at high precision). The engine is
define-by-run: every op computes its forward value immediately and records
a closure that adds chain-rule contributions into its parents. Custom
gradient rules (straight-through rounding, stop-gradient) are ordinary ops.

Broadcasting is limited to scalars (0-d / size-1 operands); anything else
must match shapes exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError

LN2 = float(np.log(2.0))

# When True every op validates its output; kept off on the training path
# (the trainer checks the loss and all leaf gradients each step instead).
CHECK_FINITE = False


def assert_finite(array, what="tensor"):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")


class Node:
    """One graph vertex: an op tag, parent references, the forward value,
    and a lazily allocated gradient accumulator of the same shape."""

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self._backward = None
        if CHECK_FINITE:
            assert_finite(value, op)

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(array, requires_grad=True):
    """Wrap a parameter array (no copy) as a graph leaf."""
    return Node(np.asarray(array), (), "leaf", requires_grad)


def constant(value, dtype=np.float32):
    return Node(np.asarray(value, dtype=dtype), (), "const", False)


def accumulate(node, contribution):
    """Add one chain-rule contribution into node's gradient accumulator."""
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += contribution


def _requires(*nodes):
    return any(n.requires_grad for n in nodes)


def _check_elementwise(a, b):
    if a.value.shape != b.value.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(
            f"elementwise operands {a.value.shape} vs {b.value.shape} "
            "(only scalar broadcast is supported)"
        )


def _reduce_to(g, shape):
    """Reduce a broadcast gradient back to a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b):
    _check_elementwise(a, b)
    out = Node(a.value + b.value, (a, b), "add", _requires(a, b))

    def _bk(up):
        accumulate(a, _reduce_to(up, a.value.shape))
        accumulate(b, _reduce_to(up, b.value.shape))

    out._backward = _bk
    return out


def mul(a, b):
    _check_elementwise(a, b)
    out = Node(a.value * b.value, (a, b), "mul", _requires(a, b))

    def _bk(up):
        accumulate(a, _reduce_to(up * b.value, a.value.shape))
        accumulate(b, _reduce_to(up * a.value, b.value.shape))

    out._backward = _bk
    return out


def scale(a, c):
    """Multiply by a python-float constant."""
    c = float(c)
    out = Node(a.value * c, (a,), "scale", a.requires_grad)

    def _bk(up):
        accumulate(a, up * c)

    out._backward = _bk
    return out


def add_const(a, c):
    c = float(c)
    out = Node(a.value + c, (a,), "add_const", a.requires_grad)

    def _bk(up):
        accumulate(a, up)

    out._backward = _bk
    return out


def neg(a):
    return scale(a, -1.0)


def sub(a, b):
    return add(a, neg(b))


def relu(a):
    out = Node(np.maximum(a.value, 0), (a,), "relu", a.requires_grad)

    def _bk(up):
        accumulate(a, up * (a.value > 0))

    out._backward = _bk
    return out


def abs_(a):
    out = Node(np.abs(a.value), (a,), "abs", a.requires_grad)

    def _bk(up):
        # subgradient 0 at exactly 0 (np.sign(0) == 0)
        accumulate(a, up * np.sign(a.value))

    out._backward = _bk
    return out


def exp2(a):
    out = Node(np.exp2(a.value), (a,), "exp2", a.requires_grad)

    def _bk(up):
        accumulate(a, up * (LN2 * out.value))

    out._backward = _bk
    return out


def clamp(a, lo, hi):
    """Clamp to [lo, hi]; bounds are scalars (Node or number).

    Boundary ties count as clamped, and the lower bound wins where the
    bounds coincide, so the gradient masks are: below = a <= lo,
    above = (a >= hi) and not below, inside = the rest.
    """
    lo_node = lo if isinstance(lo, Node) else None
    hi_node = hi if isinstance(hi, Node) else None
    lo_v = lo.value if lo_node is not None else np.asarray(lo, dtype=a.dtype)
    hi_v = hi.value if hi_node is not None else np.asarray(hi, dtype=a.dtype)
    if lo_v.size != 1 or hi_v.size != 1:
        raise ShapeError("clamp bounds must be scalars")

    below = a.value <= lo_v
    above = (a.value >= hi_v) & ~below
    out_value = np.where(below, lo_v, np.where(above, hi_v, a.value))
    parents = tuple(n for n in (a, lo_node, hi_node) if n is not None)
    out = Node(out_value.astype(a.dtype, copy=False), parents, "clamp",
               _requires(*parents))

    def _bk(up):
        accumulate(a, up * ~(below | above))
        if lo_node is not None:
            accumulate(lo_node, _reduce_to(up * below, lo_node.value.shape))
        if hi_node is not None:
            accumulate(hi_node, _reduce_to(up * above, hi_node.value.shape))

    out._backward = _bk
    return out


def round_ste(a):
    """Round to nearest, ties to even; backward treats rounding as identity."""
    out = Node(np.rint(a.value), (a,), "round_ste", a.requires_grad)

    def _bk(up):
        accumulate(a, up)

    out._backward = _bk
    return out


def stop_gradient(a):
    """Detach: same forward value (shared buffer), no gradient path."""
    return Node(a.value, (), "stop_gradient", False)


def sum_(a):
    out = Node(np.asarray(a.value.sum()), (a,), "sum", a.requires_grad)

    def _bk(up):
        accumulate(a, np.broadcast_to(up, a.value.shape))

    out._backward = _bk
    return out


def mean_(a):
    n = a.value.size
    out = Node(np.asarray(a.value.mean()), (a,), "mean", a.requires_grad)

    def _bk(up):
        accumulate(a, np.broadcast_to(up / n, a.value.shape))

    out._backward = _bk
    return out


def backward(root):
    """Reverse-mode sweep from a scalar root.

    Visits every node exactly once in reverse topological order and leaves
    d(root)/d(leaf) in each reachable leaf's .grad.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")

    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if CHECK_FINITE:
                assert_finite(node.grad, f"grad of {node.op}")
