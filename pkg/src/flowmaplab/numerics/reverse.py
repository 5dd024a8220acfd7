"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Node` wraps an ndarray and records, per producing operation,
its parent nodes and the vector-Jacobian closure for each parent.
``backward`` walks the graph in reverse topological order and
accumulates adjoints.  Only float64/float32 data is expected; dtype is
preserved by the underlying numpy ops.

Binary operators accept plain arrays and scalars on either side; those
enter the graph as constants.  ``__array_ufunc__ = None`` forces numpy
to defer to the reflected operators instead of elementwise-objectifying
a Node.
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np

from .trees import tree_flatten, tree_map

Vjp = Callable[[np.ndarray], np.ndarray]


class UnsupportedOpError(TypeError):
    """An op was asked to handle a type outside {ndarray, scalar, Node, Dual}."""


class NonFiniteLossError(ArithmeticError):
    """A loss or activation came out NaN/inf; message carries diagnostics."""


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    # sum away prepended axes, then sum kept axes that were size-1
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _matmul_unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Like :func:`unbroadcast` but the last two axes are matrix axes."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape[:-2]) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the reverse-mode graph."""

    __slots__ = ("value", "parents", "grad")
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple[tuple["Node", Vjp], ...] = ()):
        self.value = np.asarray(value)
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node(shape={self.value.shape}, nparents={len(self.parents)})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        ov = other.value if isinstance(other, Node) else np.asarray(other)
        out = Node(self.value + ov)
        parents = [(self, lambda g, s=self.value.shape: unbroadcast(g, s))]
        if isinstance(other, Node):
            parents.append((other, lambda g, s=ov.shape: unbroadcast(g, s)))
        out.parents = tuple(parents)
        return out

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Node(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        ov = other.value if isinstance(other, Node) else np.asarray(other)
        out = Node(self.value - ov)
        parents = [(self, lambda g, s=self.value.shape: unbroadcast(g, s))]
        if isinstance(other, Node):
            parents.append((other, lambda g, s=ov.shape: unbroadcast(-g, s)))
        out.parents = tuple(parents)
        return out

    def __rsub__(self, other):
        out = Node(np.asarray(other) - self.value)
        out.parents = ((self, lambda g, s=self.value.shape: unbroadcast(-g, s)),)
        return out

    def __mul__(self, other):
        ov = other.value if isinstance(other, Node) else np.asarray(other)
        sv = self.value
        out = Node(sv * ov)
        parents = [(self, lambda g, o=ov, s=sv.shape: unbroadcast(g * o, s))]
        if isinstance(other, Node):
            parents.append((other, lambda g, o=sv, s=ov.shape: unbroadcast(g * o, s)))
        out.parents = tuple(parents)
        return out

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        ov = other.value if isinstance(other, Node) else np.asarray(other)
        sv = self.value
        out = Node(sv / ov)
        parents = [(self, lambda g, o=ov, s=sv.shape: unbroadcast(g / o, s))]
        if isinstance(other, Node):
            parents.append(
                (other, lambda g, a=sv, o=ov, s=ov.shape: unbroadcast(-g * a / (o * o), s))
            )
        out.parents = tuple(parents)
        return out

    def __rtruediv__(self, other):
        ov = np.asarray(other)
        sv = self.value
        out = Node(ov / sv)
        out.parents = (
            (self, lambda g, a=ov, o=sv, s=sv.shape: unbroadcast(-g * a / (o * o), s)),
        )
        return out

    def __pow__(self, p):
        if isinstance(p, Node):
            raise UnsupportedOpError("only constant exponents are supported")
        sv = self.value
        out = Node(sv**p)
        out.parents = ((self, lambda g, v=sv, p=p: g * p * v ** (p - 1)),)
        return out

    def __matmul__(self, other):
        ov = other.value if isinstance(other, Node) else np.asarray(other)
        sv = self.value
        if sv.ndim < 2 or ov.ndim < 2:
            raise UnsupportedOpError("matmul operands must be at least 2-D")
        out = Node(sv @ ov)
        parents = [
            (
                self,
                lambda g, o=ov, s=sv.shape: _matmul_unbroadcast(
                    g @ np.swapaxes(o, -1, -2), s
                ),
            )
        ]
        if isinstance(other, Node):
            parents.append(
                (
                    other,
                    lambda g, a=sv, s=ov.shape: _matmul_unbroadcast(
                        np.swapaxes(a, -1, -2) @ g, s
                    ),
                )
            )
        out.parents = tuple(parents)
        return out

    def __rmatmul__(self, other):
        av = np.asarray(other)
        sv = self.value
        if av.ndim < 2 or sv.ndim < 2:
            raise UnsupportedOpError("matmul operands must be at least 2-D")
        out = Node(av @ sv)
        out.parents = (
            (
                self,
                lambda g, a=av, s=sv.shape: _matmul_unbroadcast(
                    np.swapaxes(a, -1, -2) @ g, s
                ),
            ),
        )
        return out

    def __getitem__(self, idx):
        sv = self.value
        out = Node(sv[idx])

        def vjp(g, idx=idx, shape=sv.shape, dtype=sv.dtype):
            z = np.zeros(shape, dtype=dtype)
            np.add.at(z, idx, g)
            return z

        out.parents = ((self, vjp),)
        return out


def backward(root: Node) -> None:
    """Accumulate adjoints of every ancestor of ``root`` into ``.grad``.

    ``root`` must be scalar (size 1).  Uses an iterative topological
    sort so graph depth is not limited by the Python recursion limit.
    """
    if np.size(root.value) != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, copy=True)
            else:
                parent.grad = parent.grad + contrib


def value_and_grad(fn: Callable, params: Any, has_aux: bool = False):
    """Evaluate ``fn`` on a Node-wrapped copy of ``params`` and differentiate.

    Args:
        fn: maps a tree of Nodes to a scalar Node, or to ``(scalar, aux)``
            when ``has_aux``.  ``aux`` must not contain Nodes.
        params: tree of ndarrays.
        has_aux: whether ``fn`` returns an auxiliary payload.

    Returns:
        ``(value, grads)`` or ``((value, aux), grads)``; ``grads`` has the
        structure of ``params`` with zero arrays for unused leaves.

    Raises:
        NonFiniteLossError: the loss value is NaN or inf.
    """
    nodes = tree_map(lambda a: Node(np.asarray(a)), params)
    out = fn(nodes)
    loss, aux = (out if has_aux else (out, None))
    if isinstance(loss, Node):
        loss_val = loss.value
    else:
        # fn turned out constant w.r.t. params (e.g. everything stop-gradiented)
        loss_val = np.asarray(loss)
    if not np.all(np.isfinite(loss_val)):
        raise NonFiniteLossError(f"loss is non-finite: {loss_val!r}")
    if isinstance(loss, Node):
        backward(loss)
    grads = tree_map(
        lambda n: n.grad if n.grad is not None else np.zeros_like(n.value), nodes
    )
    value = float(loss_val)
    return ((value, aux), grads) if has_aux else (value, grads)


def grad(fn: Callable, params: Any) -> Any:
    """Gradient of scalar ``fn`` at ``params`` (tree of ndarrays)."""
    _, grads = value_and_grad(fn, params)
    return grads
