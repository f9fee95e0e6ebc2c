"""Tape-free reverse-mode autodiff over numpy arrays.

Every backward rule is written with the same differentiable ops, so a
gradient computed with ``create_graph=True`` is itself a graph node and can be
differentiated again (double backprop).
"""

from __future__ import annotations

import threading

import numpy as np

_state = threading.local()


def _graph_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_graph:
    """Context manager that stops recording parents for new nodes."""

    def __enter__(self):
        self._prev = _graph_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False


class Node:
    __slots__ = ("value", "parents", "backward", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = ()
        self.backward = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Node(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value) -> Node:
    return Node(value, requires_grad=True)


def const(value) -> Node:
    return Node(value, requires_grad=False)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, parents, backward) -> Node:
    out = Node(value)
    if _graph_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward = backward
    return out


# -- structural ops ---------------------------------------------------------

def sum_to(a: Node, shape) -> Node:
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.value.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    value = a.value.sum(axis=axes, keepdims=True).reshape(shape)
    src = a.shape
    return _make(value, (a,), lambda g: (broadcast_to(g, src),))


def broadcast_to(a: Node, shape) -> Node:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (sum_to(g, src),))


def reshape(a: Node, shape) -> Node:
    src = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (reshape(g, src),))


def transpose(a: Node) -> Node:
    return _make(a.value.T, (a,), lambda g: (transpose(g),))


def sum_(a: Node, axis=None, keepdims=False) -> Node:
    src = a.shape
    value = a.value.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * a.value.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.value.ndim for ax in axes)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kshape), src),)

    return _make(value, (a,), backward)


def take(a: Node, index: np.ndarray) -> Node:
    """Gather from the flattened ``a`` with an integer index array."""
    src = a.shape
    return _make(a.value.reshape(-1)[index], (a,), lambda g: (scatter_add(g, index, src),))


def scatter_add(g: Node, index: np.ndarray, shape) -> Node:
    """Adjoint of :func:`take`: accumulate ``g`` into a zero array of ``shape``."""
    flat = np.zeros(int(np.prod(shape)))
    np.add.at(flat, index.reshape(-1), g.value.reshape(-1))
    return _make(flat.reshape(shape), (g,), lambda gg: (take(gg, index),))


# -- arithmetic -------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (neg(g),))


def mul(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape
    return _make(
        a.value * b.value, (a, b), lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb))
    )


def div(a: Node, b: Node) -> Node:
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return sum_to(ga, sa), sum_to(gb, sb)

    return _make(a.value / b.value, (a, b), backward)


def matmul(a: Node, b: Node) -> Node:
    return _make(
        a.value @ b.value,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def exp(a: Node) -> Node:
    out = None

    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.value), (a,), backward)
    return out


def log(a: Node) -> Node:
    return _make(np.log(a.value), (a,), lambda g: (div(g, a),))


# -- activations ------------------------------------------------------------

def _sigmoid_value(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Node) -> Node:
    out = None

    def backward(g):
        return (mul(g, mul(out, 1.0 - out)),)

    out = _make(_sigmoid_value(a.value), (a,), backward)
    return out


def tanh(a: Node) -> Node:
    out = None

    def backward(g):
        return (mul(g, 1.0 - mul(out, out)),)

    out = _make(np.tanh(a.value), (a,), backward)
    return out


def softplus(a: Node) -> Node:
    value = np.logaddexp(0.0, a.value)
    return _make(value, (a,), lambda g: (mul(g, sigmoid(a)),))


def relu(a: Node) -> Node:
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g: (mul(g, const(mask)),))


ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "softplus": softplus, "relu": relu}
SMOOTH_ACTIVATIONS = frozenset({"sigmoid", "tanh", "softplus"})


def log_softmax(z: Node) -> Node:
    # The row max is a constant shift; log-softmax is invariant to it.
    shift = const(z.value.max(axis=1, keepdims=True))
    shifted = z - shift
    lse = log(sum_(exp(shifted), axis=1, keepdims=True))
    return shifted - lse


# -- differentiation --------------------------------------------------------

def _toposort(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Node, wrt, grad_output=None, create_graph=False):
    """Gradients of ``output`` with respect to each node in ``wrt``.

    Returns Nodes when ``create_graph`` is set (so they can be differentiated
    again) and plain arrays otherwise. Inputs unreachable from ``output`` get
    zero gradients.
    """
    if grad_output is None:
        seed = const(np.ones_like(output.value))
    else:
        seed = _wrap(grad_output)
    grads = {id(output): seed}
    prev = _graph_enabled()
    _state.enabled = bool(create_graph)
    try:
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)
    finally:
        _state.enabled = prev
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = const(np.zeros_like(w.value))
        out.append(g if create_graph else g.value)
    return out
