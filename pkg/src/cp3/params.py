"""Parameter trees: dataclasses, lists and dicts whose leaves are arrays or Tensors.

Structure (ints, strings, flags) rides along untouched; only array leaves are
visited. Names are dotted paths, which is what checkpoints and the optimizer
key on.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from cp3.autodiff import Tensor


def _is_leaf(x) -> bool:
    return isinstance(x, (np.ndarray, Tensor))


def tree_items(tree, prefix: str = "") -> Iterator[Tuple[str, object]]:
    """Yield ``(dotted_name, leaf)`` in a fixed, structure-defined order."""
    if _is_leaf(tree):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            yield from tree_items(getattr(tree, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            yield from tree_items(v, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield from tree_items(tree[k], f"{prefix}.{k}" if prefix else str(k))


def tree_map(fn: Callable, tree, prefix: str = "", with_name: bool = False):
    """Rebuild ``tree`` with every leaf replaced by ``fn(leaf)`` (or ``fn(name, leaf)``)."""
    if _is_leaf(tree):
        return fn(prefix, tree) if with_name else fn(tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        changes = {}
        for f in dataclasses.fields(tree):
            name = f"{prefix}.{f.name}" if prefix else f.name
            changes[f.name] = tree_map(fn, getattr(tree, f.name), name, with_name)
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, (list, tuple)):
        out = [tree_map(fn, v, f"{prefix}.{i}" if prefix else str(i), with_name) for i, v in enumerate(tree)]
        return type(tree)(out)
    if isinstance(tree, dict):
        return {k: tree_map(fn, tree[k], f"{prefix}.{k}" if prefix else str(k), with_name) for k in tree}
    return tree


def to_tensors(tree):
    """Wrap every array leaf as a fresh leaf Tensor (for a training step)."""
    return tree_map(lambda a: Tensor(np.array(a, copy=True)), tree)


def grads_of(tree):
    """Gradient tree matching a Tensor tree; unused leaves get zeros."""
    return tree_map(lambda t: t.grad if t.grad is not None else np.zeros_like(t.value), tree)


def values_of(tree):
    return tree_map(lambda t: t.value if isinstance(t, Tensor) else t, tree)


def as_dict(tree) -> Dict[str, np.ndarray]:
    return {k: (v.value if isinstance(v, Tensor) else v) for k, v in tree_items(tree)}


def load_dict(template, values: Dict[str, np.ndarray]):
    """Fill ``template``'s leaves from ``values`` by name; shapes must match."""

    def fill(name, leaf):
        if name not in values:
            raise KeyError(f"missing parameter {name!r}")
        v = np.asarray(values[name], dtype=np.float64)
        if v.shape != np.shape(leaf):
            raise ValueError(f"parameter {name!r}: shape {v.shape} != expected {np.shape(leaf)}")
        return v.copy()

    return tree_map(fill, template, with_name=True)


def count(tree) -> int:
    return sum(int(np.size(v.value if isinstance(v, Tensor) else v)) for _, v in tree_items(tree))
