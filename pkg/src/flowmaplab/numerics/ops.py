"""Primitive op set shared by plain-numpy, reverse-mode and forward-mode code.

Every function here accepts ndarrays/scalars, :class:`Node` or
:class:`Dual` inputs and returns the matching kind, so model code is
written once and runs in inference, backprop or JVP mode unchanged.
Unknown input types raise :class:`UnsupportedOpError`.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np
from scipy.special import expit

from .forward import Dual
from .reverse import Node, UnsupportedOpError, unbroadcast


def primal(x: Any) -> np.ndarray:
    """The underlying ndarray of ``x``, whatever mode it is in."""
    if isinstance(x, Node):
        return x.value
    if isinstance(x, Dual):
        return x.primal
    return np.asarray(x)


def stop_gradient(x: Any) -> np.ndarray:
    """Detach ``x`` from differentiation; idempotent, value-transparent."""
    return primal(x)


def _bad(x: Any, op: str):
    raise UnsupportedOpError(f"{op} got unsupported type {type(x).__name__}")


def exp(x):
    if isinstance(x, Node):
        y = np.exp(x.value)
        return Node(y, ((x, lambda g, y=y: g * y),))
    if isinstance(x, Dual):
        y = np.exp(x.primal)
        return Dual(y, y * x.tangent)
    return np.exp(x)


def log(x):
    if isinstance(x, Node):
        v = x.value
        return Node(np.log(v), ((x, lambda g, v=v: g / v),))
    if isinstance(x, Dual):
        return Dual(np.log(x.primal), x.tangent / x.primal)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Node):
        y = np.sqrt(x.value)
        return Node(y, ((x, lambda g, y=y: g / (2.0 * y)),))
    if isinstance(x, Dual):
        y = np.sqrt(x.primal)
        return Dual(y, x.tangent / (2.0 * y))
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Node):
        v = x.value
        return Node(np.sin(v), ((x, lambda g, v=v: g * np.cos(v)),))
    if isinstance(x, Dual):
        return Dual(np.sin(x.primal), np.cos(x.primal) * x.tangent)
    return np.sin(x)


def cos(x):
    if isinstance(x, Node):
        v = x.value
        return Node(np.cos(v), ((x, lambda g, v=v: -g * np.sin(v)),))
    if isinstance(x, Dual):
        return Dual(np.cos(x.primal), -np.sin(x.primal) * x.tangent)
    return np.cos(x)


def tanh(x):
    if isinstance(x, Node):
        y = np.tanh(x.value)
        return Node(y, ((x, lambda g, y=y: g * (1.0 - y * y)),))
    if isinstance(x, Dual):
        y = np.tanh(x.primal)
        return Dual(y, (1.0 - y * y) * x.tangent)
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Node):
        y = expit(x.value)
        return Node(y, ((x, lambda g, y=y: g * y * (1.0 - y)),))
    if isinstance(x, Dual):
        y = expit(x.primal)
        return Dual(y, y * (1.0 - y) * x.tangent)
    return expit(np.asarray(x, dtype=np.float64))


def silu(x):
    return x * sigmoid(x)


def sum_(x, axis=None, keepdims: bool = False):
    if isinstance(x, Node):
        v = x.value
        out = np.sum(v, axis=axis, keepdims=keepdims)

        def vjp(g, shape=v.shape, axis=axis, keepdims=keepdims):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return Node(out, ((x, vjp),))
    if isinstance(x, Dual):
        return Dual(
            np.sum(x.primal, axis=axis, keepdims=keepdims),
            np.sum(x.tangent, axis=axis, keepdims=keepdims),
        )
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    shape = primal(x).shape
    if axis is None:
        n = int(np.prod(shape)) if shape else 1
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[a] for a in axes]))
    return sum_(x, axis=axis, keepdims=keepdims) / n


def reshape(x, shape):
    if isinstance(x, Node):
        v = x.value
        return Node(v.reshape(shape), ((x, lambda g, s=v.shape: np.reshape(g, s)),))
    if isinstance(x, Dual):
        return Dual(x.primal.reshape(shape), x.tangent.reshape(shape))
    return np.reshape(x, shape)


def swapaxes(x, a: int, b: int):
    if isinstance(x, Node):
        return Node(np.swapaxes(x.value, a, b), ((x, lambda g: np.swapaxes(g, a, b)),))
    if isinstance(x, Dual):
        return Dual(np.swapaxes(x.primal, a, b), np.swapaxes(x.tangent, a, b))
    return np.swapaxes(x, a, b)


def concatenate(parts: Sequence, axis: int = -1):
    vals = [primal(p) for p in parts]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    if any(isinstance(p, Node) for p in parts):
        out = np.concatenate(vals, axis=axis)
        parents = []
        for i, p in enumerate(parts):
            if not isinstance(p, Node):
                continue

            def vjp(g, lo=offsets[i], hi=offsets[i + 1], axis=axis):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return g[tuple(sl)]

            parents.append((p, vjp))
        return Node(out, tuple(parents))
    if any(isinstance(p, Dual) for p in parts):
        tangents = [
            p.tangent if isinstance(p, Dual) else np.zeros_like(v)
            for p, v in zip(parts, vals)
        ]
        return Dual(np.concatenate(vals, axis=axis), np.concatenate(tangents, axis=axis))
    return np.concatenate(vals, axis=axis)


def matmul(a, b):
    if isinstance(a, (Node, Dual)):
        return a @ b
    if isinstance(b, (Node, Dual)):
        return np.asarray(a) @ b
    return np.asarray(a) @ np.asarray(b)


def softmax(x, axis: int = -1):
    """Softmax along ``axis``, shifted by a detached max for stability."""
    z = x - np.max(primal(x), axis=axis, keepdims=True)
    e = exp(z)
    return e / sum_(e, axis=axis, keepdims=True)


def layer_norm(x, eps: float = 1e-6):
    """Normalize the last axis to zero mean, unit variance; no affine part."""
    m = mean(x, axis=-1, keepdims=True)
    c = x - m
    v = mean(c * c, axis=-1, keepdims=True)
    return c / sqrt(v + eps)


def rms_norm(x, eps: float = 1e-6):
    """Scale the last axis to unit root-mean-square; no affine part."""
    return x / sqrt(mean(x * x, axis=-1, keepdims=True) + eps)


def take_rows(table, idx):
    """Row lookup ``table[idx]`` with scatter-add adjoint."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise UnsupportedOpError(f"take_rows needs integer indices, got {idx.dtype}")
    if isinstance(table, (Node, Dual)):
        return table[idx]
    return np.asarray(table)[idx]
