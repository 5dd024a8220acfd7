"""Differentiation, random streams and tree utilities backing the lab.

Arrays are numpy ndarrays, float64 unless a caller opts into float32;
ops preserve the dtype they are given.
"""

from .forward import Dual, jvp
from .ops import primal, stop_gradient
from .reverse import (
    Node,
    NonFiniteLossError,
    UnsupportedOpError,
    backward,
    grad,
    value_and_grad,
)
from .rng import RngStream, rng_fork
from .trees import (
    global_norm,
    tree_all_finite,
    tree_copy,
    tree_flatten,
    tree_from_paths,
    tree_leaves,
    tree_map,
)

__all__ = [
    "Dual",
    "Node",
    "NonFiniteLossError",
    "RngStream",
    "UnsupportedOpError",
    "backward",
    "global_norm",
    "grad",
    "jvp",
    "primal",
    "rng_fork",
    "stop_gradient",
    "tree_all_finite",
    "tree_copy",
    "tree_flatten",
    "tree_from_paths",
    "tree_leaves",
    "tree_map",
    "value_and_grad",
]
