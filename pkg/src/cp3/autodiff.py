"""A small dense-tensor reverse-mode differentiation engine.

Values are float64 numpy arrays. Every op validates shapes when it is recorded,
traps non-finite results, and stores a closure that maps the output gradient to
input gradients. Elementwise binary ops require identical shapes; broadcasting
only happens through :func:`broadcast_to`. The one declared exception is
:func:`matmul`, whose right operand may be a plain matrix shared across the
leading (batch) dimensions of the left operand.

Discrete decisions taken during a forward pass (relu signs, max-reduce winners,
neighbour selections) are logged to the active :class:`Recorder`, so that
:func:`gradcheck` can skip coordinates whose finite-difference stencil crosses
one of them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from cp3.errors import NonFiniteError, ShapeError, ValidationError

_local = threading.local()


class Recorder:
    """Collects the discrete branch decisions of one forward evaluation."""

    def __init__(self):
        self.decisions: List[np.ndarray] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def same_branches(self, other: "Recorder") -> bool:
        if len(self.decisions) != len(other.decisions):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.decisions, other.decisions))


def record_decision(arr: np.ndarray) -> None:
    stack = getattr(_local, "stack", None)
    if stack:
        stack[-1].decisions.append(np.array(arr, copy=True))


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    # a sum is non-finite iff some entry is (barring overflow near 1e308, which is re-checked)
    if not np.isfinite(np.add.reduce(arr, axis=None)) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite value produced")
    return arr


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None, op: str = "leaf"):
        self.value = _check_finite(op, np.asarray(value, dtype=np.float64))
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def constant(value) -> Tensor:
    return Tensor(value, op="const")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} differ (use broadcast_to)")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return Tensor(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NonFiniteError("div: division by zero")
    out = av / bv
    return Tensor(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.value * c, (a,), lambda g: (g * c,), "scale")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.value < 0):
        raise NonFiniteError("sqrt: negative input")
    out = np.sqrt(a.value)

    def backward(g):
        if np.any(out == 0):
            raise NonFiniteError("sqrt (backward): gradient undefined at zero")
        return (g / (2.0 * out),)

    return Tensor(out, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    record_decision(mask)
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m), or batched (..., n, k) @ (..., k, m) with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", f"batch dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if shared:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return Tensor(av @ bv, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor(y, (a,), backward, "softmax")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat", "nothing to concatenate")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs:
        if x.ndim != nd or x.shape[:ax] + x.shape[ax + 1 :] != xs[0].shape[:ax] + xs[0].shape[ax + 1 :]:
            raise ShapeError("concat", f"incompatible shapes {[x.shape for x in xs]} along axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor(np.concatenate([x.value for x in xs], axis=ax), xs, backward, "concat")


def take(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing goes through :func:`gather`."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (isinstance(k, (slice, int)) or k is Ellipsis or k is None):
            raise ShapeError("take", f"only basic indexing is supported, got {type(k).__name__}")
    out = a.value[key]
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        ga[key] += g
        return (ga,)

    return Tensor(np.array(out, copy=True), (a,), backward, "take")


def gather(a: Tensor, idx) -> Tensor:
    """Rows of a (B, N, C) tensor picked per batch: ``out[b, ...] = a[b, idx[b, ...]]``.

    A 2-d ``a`` of shape (N, C) is indexed directly: ``out = a[idx]``.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather", "indices must be integers")
    if a.ndim == 2:
        n, c = a.shape
        flat = idx.reshape(-1)
        out_shape = idx.shape + (c,)
        rows = n
        batches = 1
    elif a.ndim == 3:
        batches, n, c = a.shape
        if idx.shape[0] != batches:
            raise ShapeError("gather", f"index batch {idx.shape[0]} != tensor batch {batches}")
        offs = (np.arange(batches) * n).reshape((batches,) + (1,) * (idx.ndim - 1))
        flat = (idx + offs).reshape(-1)
        out_shape = idx.shape + (c,)
        rows = n
    else:
        raise ShapeError("gather", f"expected a 2-d or 3-d tensor, got {a.shape}")
    if flat.size and (idx.min() < 0 or idx.max() >= rows):
        raise ShapeError("gather", f"index out of range for {rows} rows")
    src = a.value.reshape(-1, c)
    shape = a.shape

    def backward(g):
        cols = (flat[:, None] * c + np.arange(c)).reshape(-1)
        ga = np.bincount(cols, weights=g.reshape(-1), minlength=batches * rows * c)
        return (ga.reshape(shape),)

    return Tensor(src[flat].reshape(out_shape), (a,), backward, "gather")


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max over ``axis`` (dropped); the subgradient goes to the lowest-index argmax."""
    ax = axis % a.ndim
    arg = np.argmax(a.value, axis=ax)
    record_decision(arg)
    out = np.take_along_axis(a.value, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (ga,)

    return Tensor(out, (a,), backward, "max")


def sum_reduce(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        return Tensor(np.array(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return Tensor(a.value.sum(axis=ax), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum_reduce(a), 1.0 / a.value.size)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", f"cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, (s, t) in enumerate(zip(src, shape[lead:])) if s == 1 and t != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor(np.array(out), (a,), backward, "broadcast")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return Tensor(out, (a,), lambda g: (g.reshape(src),), "reshape")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    shape = list(a.shape)
    shape.insert(axis % (a.ndim + 1), 1)
    return reshape(a, shape)


def _topo_order(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(node) into ``.grad`` of every node reachable from ``output``."""
    if output.value.size != 1:
        raise ValidationError(f"gradient seed must be scalar, got shape {output.shape}")
    order = _topo_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            _check_finite(f"{node.op} (backward)", g)
            parent.grad = g if parent.grad is None else parent.grad + g


# --------------------------------------------------------------------------- graphs


class Graph:
    """A function of named tensors, recorded afresh on every evaluation.

    ``fn`` receives keyword :class:`Tensor` arguments and returns a Tensor
    (exposed as output ``"out"``) or a mapping of output names to Tensors.
    """

    def __init__(self, fn: Callable[..., object], shapes: Optional[Mapping[str, tuple]] = None):
        self.fn = fn
        self.shapes = dict(shapes) if shapes else None

    def record(self, inputs: Mapping[str, np.ndarray]):
        if self.shapes is not None:
            for name, shape in self.shapes.items():
                if name not in inputs:
                    raise ShapeError("graph", f"missing input {name!r}")
                if tuple(np.shape(inputs[name])) != tuple(shape):
                    raise ShapeError("graph", f"input {name!r} has shape {np.shape(inputs[name])}, expected {shape}")
        leaves = {k: Tensor(np.array(v, dtype=np.float64, copy=True)) for k, v in inputs.items()}
        rec = Recorder()
        with rec:
            out = self.fn(**leaves)
        outputs = {"out": out} if isinstance(out, Tensor) else dict(out)
        return leaves, outputs, rec


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    _, outputs, _ = graph.record(inputs)
    return {k: v.value for k, v in outputs.items()}


def gradients(graph: Graph, inputs: Mapping[str, np.ndarray], seed_output: str = "out") -> Dict[str, np.ndarray]:
    leaves, outputs, _ = graph.record(inputs)
    if seed_output not in outputs:
        raise ValidationError(f"no output named {seed_output!r}")
    backward(outputs[seed_output])
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    floor: float = 1e-12
    excluded: List[tuple] = field(default_factory=list)
    worst: Optional[tuple] = None

    def __float__(self):
        return self.max_rel_error


def relative_error(a: float, n: float, floor: float = 1e-12) -> float:
    return abs(a - n) / max(floor, abs(a), abs(n))


def gradcheck(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-6,
    seed_output: str = "out",
    wrt: Optional[Iterable[str]] = None,
    order: int = 2,
    noise_floor: bool = False,
) -> GradcheckResult:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    The step for coordinate ``x`` is ``h * max(1, |x|)``. ``order=2`` is the
    two-point stencil ``(f(x+h) - f(x-h)) / 2h``; ``order=4`` the five-point one,
    whose O(h^4) truncation allows a larger step and so less rounding noise.
    A coordinate is excluded (and listed in ``excluded``) when moving it by
    10 steps either way changes any recorded branch decision, since finite
    differences are meaningless across a kink.

    Relative error is ``|a - n| / max(floor, |a|, |n|)`` with ``floor = 1e-12``.
    With ``noise_floor=True`` the floor becomes ``1e5 * eps * max(1, |f|) / h``:
    at a 1e-4 relative tolerance this accepts absolute disagreement up to
    ``10 * eps * max(1, |f|) / h``, the usual bound on the rounding noise of a
    difference quotient. Without it, gradients that are exactly zero (e.g. a
    bias feeding a softmax) get scored against pure rounding noise.
    """
    if order not in (2, 4):
        raise ValidationError("order must be 2 or 4")
    inputs = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    analytic = gradients(graph, inputs, seed_output)
    _, base_out, base = graph.record(inputs)
    floor = 1e-12
    if noise_floor:
        fx = abs(float(base_out[seed_output].value))
        floor = max(floor, 1e5 * np.finfo(np.float64).eps * max(1.0, fx) / h)
    names = list(wrt) if wrt is not None else list(inputs)

    def evaluate(name, flat_i, x):
        arr = inputs[name].reshape(-1)
        old = arr[flat_i]
        arr[flat_i] = x
        try:
            _, outs, rec = graph.record(inputs)
        finally:
            arr[flat_i] = old
        return float(outs[seed_output].value), rec

    worst, max_err, checked, excluded = None, 0.0, 0, []
    for name in names:
        flat = inputs[name].reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            x = flat[i]
            step = h * max(1.0, abs(x))
            kinked = False
            for far in (x + 10 * step, x - 10 * step):
                if not evaluate(name, i, far)[1].same_branches(base):
                    kinked = True
                    break
            if kinked:
                excluded.append((name, i))
                continue
            fp, _ = evaluate(name, i, x + step)
            fm, _ = evaluate(name, i, x - step)
            num = (fp - fm) / ((x + step) - (x - step))
            if order == 4:
                fp2, _ = evaluate(name, i, x + 2 * step)
                fm2, _ = evaluate(name, i, x - 2 * step)
                num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * step)
            err = relative_error(ga[i], num, floor)
            checked += 1
            if err > max_err:
                max_err, worst = err, (name, i, float(ga[i]), num)
    return GradcheckResult(max_err, checked, floor, excluded, worst)
