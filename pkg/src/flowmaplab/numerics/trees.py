"""Nested-container utilities for parameter collections.

A "tree" is any nesting of dicts, lists and tuples whose leaves are
numpy arrays (or scalars).  Dict iteration order is insertion order,
which every builder in this package keeps deterministic, so flattening
the same tree twice yields the same leaf sequence.
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np


def tree_map(fn: Callable, tree: Any, *rest: Any) -> Any:
    """Apply ``fn`` leaf-wise, zipping over structurally identical trees."""
    if isinstance(tree, dict):
        return {k: tree_map(fn, v, *(r[k] for r in rest)) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        mapped = [tree_map(fn, v, *(r[i] for r in rest)) for i, v in enumerate(tree)]
        return type(tree)(mapped)
    return fn(tree, *rest)


def tree_flatten(tree: Any, prefix: str = "") -> list[tuple[str, Any]]:
    """Flatten to ``[(path, leaf), ...]`` with ``/``-joined path segments."""
    if isinstance(tree, dict):
        out = []
        for k, v in tree.items():
            out.extend(tree_flatten(v, f"{prefix}/{k}" if prefix else str(k)))
        return out
    if isinstance(tree, (list, tuple)):
        out = []
        for i, v in enumerate(tree):
            out.extend(tree_flatten(v, f"{prefix}/{i}" if prefix else str(i)))
        return out
    return [(prefix, tree)]


def tree_from_paths(items: list[tuple[str, Any]]) -> Any:
    """Rebuild a nested structure from ``tree_flatten`` output.

    Path segments that parse as integers become list indices; everything
    else becomes a dict key.  Lists must be densely indexed from 0.
    """
    root: dict = {}
    for path, leaf in items:
        parts = path.split("/")
        cur = root
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = leaf

    def materialize(node: Any) -> Any:
        if not isinstance(node, dict):
            return node
        keys = list(node.keys())
        if keys and all(k.isdigit() for k in keys):
            idx = sorted(int(k) for k in keys)
            if idx != list(range(len(idx))):
                raise ValueError(f"non-dense list indices: {sorted(keys)}")
            return [materialize(node[str(i)]) for i in idx]
        return {k: materialize(v) for k, v in node.items()}

    return materialize(root)


def tree_leaves(tree: Any) -> list[Any]:
    return [leaf for _, leaf in tree_flatten(tree)]


def tree_all_finite(tree: Any) -> bool:
    return all(np.all(np.isfinite(leaf)) for leaf in tree_leaves(tree))


def global_norm(tree: Any) -> float:
    """Euclidean norm over every entry of every leaf."""
    total = 0.0
    for leaf in tree_leaves(tree):
        arr = np.asarray(leaf, dtype=np.float64)
        total += float(np.sum(arr * arr))
    return float(np.sqrt(total))


def tree_copy(tree: Any) -> Any:
    return tree_map(lambda a: np.array(a, copy=True), tree)
