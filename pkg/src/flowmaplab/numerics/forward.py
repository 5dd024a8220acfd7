"""Forward-mode differentiation with dual numbers over numpy arrays.

A :class:`Dual` carries ``(primal, tangent)`` of identical shape.  The
operator set mirrors :mod:`flowmaplab.numerics.reverse`, so any forward
pass written against the shared op layer runs in either mode.
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from .reverse import UnsupportedOpError


class Dual:
    """Primal/tangent pair propagated through arithmetic."""

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal, tangent):
        self.primal = np.asarray(primal)
        self.tangent = np.asarray(tangent)
        if self.primal.shape != self.tangent.shape:
            raise ValueError(
                f"primal/tangent shape mismatch: {self.primal.shape} vs {self.tangent.shape}"
            )

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    def __repr__(self) -> str:  # pragma: no cover
        return f"Dual(shape={self.primal.shape})"

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal + other.primal, self.tangent + other.tangent)
        return Dual(self.primal + other, np.broadcast_to(self.tangent, np.broadcast_shapes(self.shape, np.shape(other))))

    def __radd__(self, other):
        return self.__add__(other)

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal - other.primal, self.tangent - other.tangent)
        return Dual(self.primal - other, np.broadcast_to(self.tangent, np.broadcast_shapes(self.shape, np.shape(other))))

    def __rsub__(self, other):
        return Dual(other - self.primal, np.broadcast_to(-self.tangent, np.broadcast_shapes(self.shape, np.shape(other))))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.primal * other.primal,
                self.tangent * other.primal + self.primal * other.tangent,
            )
        return Dual(self.primal * other, self.tangent * other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Dual):
            p = self.primal / other.primal
            t = (self.tangent - p * other.tangent) / other.primal
            return Dual(p, t)
        return Dual(self.primal / other, self.tangent / other)

    def __rtruediv__(self, other):
        p = other / self.primal
        return Dual(p, -p * self.tangent / self.primal)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise UnsupportedOpError("only constant exponents are supported")
        return Dual(self.primal**p, p * self.primal ** (p - 1) * self.tangent)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.primal @ other.primal,
                self.tangent @ other.primal + self.primal @ other.tangent,
            )
        return Dual(self.primal @ other, self.tangent @ other)

    def __rmatmul__(self, other):
        return Dual(other @ self.primal, other @ self.tangent)

    def __getitem__(self, idx):
        return Dual(self.primal[idx], self.tangent[idx])


def jvp(fn: Callable, xs: Any, vs: Any):
    """Jacobian-vector product ``(fn(xs), J @ vs)`` in one forward pass.

    Args:
        fn: function of one array or of ``len(xs)`` arrays.
        xs: array or sequence of arrays (the evaluation point).
        vs: tangent(s), same structure and shapes as ``xs``.

    Returns:
        ``(primal_out, tangent_out)`` as ndarrays.
    """
    single = not isinstance(xs, (tuple, list))
    xs_seq: Sequence = (xs,) if single else xs
    vs_seq: Sequence = (vs,) if single else vs
    if len(xs_seq) != len(vs_seq):
        raise ValueError(f"got {len(xs_seq)} primals but {len(vs_seq)} tangents")
    duals = []
    for x, v in zip(xs_seq, vs_seq):
        x = np.asarray(x)
        v = np.asarray(v)
        if x.shape != v.shape:
            raise ValueError(f"tangent shape {v.shape} does not match primal {x.shape}")
        duals.append(Dual(x, v))
    out = fn(*duals)
    if isinstance(out, Dual):
        return out.primal, out.tangent
    out = np.asarray(out)
    return out, np.zeros_like(out)
