"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Node` wraps an immutable value and accumulates a gradient of the
same shape. Graphs are built define-by-run: every operation returns a new
Node holding references to its parents and a closure that pushes the
upstream gradient back to them. :func:`backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "name")
    # make ndarray (op) Node dispatch to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = (), backward=None, name: str | None = None):
        # read-only view; the caller's array stays writeable
        value = np.asarray(value, dtype=DTYPE).view()
        value.flags.writeable = False
        self.value = value
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def param(value, name: str | None = None) -> Node:
    """A leaf node (learnable or input)."""
    return Node(np.array(value, dtype=DTYPE), name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        node.grad = node.grad + g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out_value = a.value + b.value

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(out_value, (a, b), _bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), _bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def _bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), _bw)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out_value = a.value / b.value

    def _bw(g):
        ga = g / b.value
        gb = -g * out_value / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out_value, (a, b), _bw)


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = as_node(a)
    out_value = np.exp(a.value)
    return Node(out_value, (a,), lambda g: (g * out_value,))


def log(a) -> Node:
    a = as_node(a)
    return Node(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a) -> Node:
    """max(0, x); the subgradient at 0 is 0."""
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    # split branches so exp never overflows
    ex = np.exp(-np.abs(x))
    out_value = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return Node(out_value, (a,), lambda g: (g * out_value * (1.0 - out_value),))


def clip(a, lo: float, hi: float) -> Node:
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,))


def smooth_l1(a, beta: float = 1.0) -> Node:
    """Elementwise Huber-style loss: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    a = as_node(a)
    x = a.value
    small = np.abs(x) < beta
    out_value = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return Node(out_value, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),))


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Node:
    """Matrix product with numpy batching semantics; differentiable in both arguments."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out_value = np.matmul(a.value, b.value)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Node(out_value, (a, b), _bw)


def transpose(a, axes: Sequence[int] | None = None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    src = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def getitem(a, idx) -> Node:
    a = as_node(a)

    def _bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return Node(a.value[idx], (a,), _bw)


def concat(items: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(x) for x in items]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), _bw)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    out_value = a.value.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Node(out_value, (a,), _bw)


def mean(a, axis=None) -> Node:
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis) * (1.0 / count)


# ---------------------------------------------------------------- normalizers


def softmax_rows(x) -> Node:
    """Softmax over the last axis, computed with max subtraction."""
    x = as_node(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_value = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        dot = (g * out_value).sum(axis=-1, keepdims=True)
        return (out_value * (g - dot),)

    return Node(out_value, (x,), _bw)


def log_softmax_rows(x) -> Node:
    x = as_node(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_value = z - lse
    probs = np.exp(out_value)

    def _bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Node(out_value, (x,), _bw)


def weighted_softmax(logits, weights, axis: int = -1) -> Node:
    """``w_i exp(a_i) / sum_k w_k exp(a_k)`` along ``axis``.

    ``weights`` must be nonnegative. Slices whose denominator is zero map to
    all-zero output and pass no gradient.
    """
    logits, weights = as_node(logits), as_node(weights)
    if logits.shape != weights.shape:
        raise ShapeError(f"weighted_softmax: {logits.shape} vs {weights.shape}")
    a = logits.value - logits.value.max(axis=axis, keepdims=True)
    e = np.exp(a)
    num = weights.value * e
    den = num.sum(axis=axis, keepdims=True)
    live = den > 0
    safe = np.where(live, den, 1.0)
    out_value = np.where(live, num / safe, 0.0)
    e_over = np.where(live, e / safe, 0.0)

    def _bw(g):
        centered = g - (g * out_value).sum(axis=axis, keepdims=True)
        return out_value * centered, e_over * centered

    return Node(out_value, (logits, weights), _bw)


# ---------------------------------------------------------------- backprop


def _topo_order(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node reachable from ``loss``.

    Returns a map from ``id(node)`` to gradient for convenience.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {id(n): n.grad for n in order if n.grad is not None}


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[Mapping[str, Node]], Node],
    point: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f`` with central differences.

    ``point`` maps names to arrays; ``f`` receives fresh leaf Nodes for them.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` set, that many coordinates per tensor are sampled.
    """
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    base = {k: np.array(v, dtype=DTYPE) for k, v in point.items()}
    leaves = {k: Node(v, name=k) for k, v in base.items()}
    backward(f(leaves))
    picker = np.random.default_rng(seed)

    def value_at(name, flat_idx, delta):
        moved = dict(base)
        arr = base[name].copy()
        arr.reshape(-1)[flat_idx] += delta
        moved[name] = arr
        return float(f({k: Node(v) for k, v in moved.items()}).value)

    per_param: dict[str, float] = {}
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(picker.choice(arr.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            numeric = (value_at(name, i, step) - value_at(name, i, -step)) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        per_param[name] = worst
    overall = max(per_param.values(), default=0.0)
    return GradCheckReport(max_rel_error=overall, per_param=per_param, tolerance=tolerance)


def leaves(params: Mapping[str, np.ndarray]) -> dict[str, Node]:
    return {k: Node(v, name=k) for k, v in params.items()}


def values(nodes: Mapping[str, Node]) -> dict[str, np.ndarray]:
    return {k: np.array(n.value) for k, n in nodes.items()}


def zero_grads(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = None
