"""Dynamic-tape reverse-mode autodiff over dense 2-D float64 grids.

Every value is stored as a ``(rows, cols)`` array; scalars are ``1x1`` and
vectors are promoted to single rows. The graph is rebuilt on every forward
pass and walked once in reverse topological order by :func:`backward`.
"""

from __future__ import annotations

import builtins
import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_enabled = True
# Names of ops whose backward output is deliberately corrupted (fault injection for selfcheck).
_faulty_ops: set[str] = set()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class TensorNode:
    """A node of the computation graph: value, accumulated grad, and how to backprop."""

    __slots__ = ("value", "_grad", "parents", "backward_rule", "requires_grad", "op")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        *,
        parents: tuple[TensorNode, ...] = (),
        backward_rule: BackwardRule | None = None,
        op: str = "leaf",
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim > 2:
            raise ShapeError(f"{op}: rank-{value.ndim} value {value.shape} not supported")
        self.value = value
        self._grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.op = op

    @property
    def grad(self) -> np.ndarray:
        # Allocated on first read; arrays stored here are never mutated in place.
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeError(f"grad shape {value.shape} does not match value shape {self.value.shape}")
        self._grad = value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item: expected a scalar, got shape {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> TensorNode:
        return TensorNode(self.value)

    def zero_grad(self) -> None:
        self._grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"TensorNode(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, TensorNode):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build values only; nothing created inside records parents or rules."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def inject_fault(*ops: str) -> Iterator[None]:
    """Scale the backward output of the named ops by 1.5 (test hook)."""
    added = [op for op in ops if op not in _faulty_ops]
    _faulty_ops.update(added)
    try:
        yield
    finally:
        _faulty_ops.difference_update(added)


def as_node(x) -> TensorNode:
    return x if isinstance(x, TensorNode) else TensorNode(x, op="const")


def _result(value: np.ndarray, op: str, parents: tuple[TensorNode, ...], rule: BackwardRule) -> TensorNode:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return TensorNode(value, True, parents=parents, backward_rule=rule, op=op)
    return TensorNode(value, op=op)


def _topo_order(root: TensorNode) -> list[TensorNode]:
    order: list[TensorNode] = []
    seen = {id(root)}
    stack: list[tuple[TensorNode, Iterator[TensorNode]]] = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def backward(root: TensorNode) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node that requires grad."""
    if root.shape != (1, 1):
        raise ShapeError(f"backward: root must be a 1x1 scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_rule is None:
            # leaves own a private writable copy
            node._grad = np.array(g) if node._grad is None else node._grad + g
            continue
        node._grad = g if node._grad is None else node._grad + g
        grads = node.backward_rule(g)
        if node.op in _faulty_ops:
            grads = [None if pg is None else pg * 1.5 for pg in grads]
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = pending.get(key)
            pending[key] = pg if prev is None else prev + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape[0] != shape[0]:
        g = g.sum(axis=0, keepdims=True)
    if g.shape[1] != shape[1]:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_check(op: str, a: TensorNode, b: TensorNode) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# binary ops


def matmul(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def rule(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _result(av @ bv, "matmul", (a, b), rule)


def add(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.value + b.value, "add", (a, b), rule)


def sub(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.value - b.value, "sub", (a, b), rule)


def mul(a, b) -> TensorNode:
    a, b = as_node(a), as_node(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value

    def rule(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _result(av * bv, "mul", (a, b), rule)


# ---------------------------------------------------------------------------
# elementwise


def relu(a) -> TensorNode:
    a = as_node(a)
    y = np.maximum(a.value, 0.0)
    return _result(y, "relu", (a,), lambda g: (np.where(y > 0, g, 0.0),))


def tanh(a) -> TensorNode:
    a = as_node(a)
    y = np.tanh(a.value)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> TensorNode:
    a = as_node(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> TensorNode:
    a = as_node(a)
    y = np.exp(a.value)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> TensorNode:
    a = as_node(a)
    x = a.value
    return _result(np.log(x), "log", (a,), lambda g: (g / x,))


def clip(a, lo: float, hi: float) -> TensorNode:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = as_node(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), "clip", (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def _reduce_shape(shape: tuple[int, int], axis: int | None) -> tuple[int, int]:
    if axis is None:
        return (1, 1)
    if axis not in (0, 1):
        raise ShapeError(f"reduction axis must be None, 0 or 1, got {axis}")
    return (1, shape[1]) if axis == 0 else (shape[0], 1)


def sum(a, axis: int | None = None) -> TensorNode:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    out_shape = _reduce_shape(a.shape, axis)
    shape = a.shape
    value = a.value.sum(axis=axis, keepdims=True).reshape(out_shape)
    return _result(value, "sum", (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a, axis: int | None = None) -> TensorNode:
    a = as_node(a)
    out_shape = _reduce_shape(a.shape, axis)
    shape = a.shape
    count = a.value.size if axis is None else shape[axis]
    value = a.value.mean(axis=axis, keepdims=True).reshape(out_shape)
    return _result(value, "mean", (a,), lambda g: (np.broadcast_to(g / count, shape),))


def logsumexp(a, axis: int | None = None) -> TensorNode:
    """``log(sum(exp(a)))`` with the max-shift, over everything or per row/column."""
    a = as_node(a)
    if not np.all(np.isfinite(a.value)):
        raise ValueError("logsumexp: input contains non-finite values")
    _reduce_shape(a.shape, axis)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    shifted = np.exp(x - m)
    total = shifted.sum(axis=axis, keepdims=True)
    value = (m + np.log(total)).reshape(_reduce_shape(a.shape, axis))
    weights = shifted / total
    return _result(value, "logsumexp", (a,), lambda g: (g * weights,))


def softmax(a) -> TensorNode:
    """Row-wise softmax."""
    a = as_node(a)
    if not np.all(np.isfinite(a.value)):
        raise ValueError("softmax: input contains non-finite values")
    x = a.value
    e = np.exp(x - x.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, "softmax", (a,), rule)


def mse(pred, target) -> TensorNode:
    """Mean of squared differences over every entry."""
    pred, target = as_node(pred), as_node(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.value - target.value
    scale = 2.0 / diff.size

    def rule(g):
        d = g * scale * diff
        return (d if pred.requires_grad else None, -d if target.requires_grad else None)

    return _result(np.array([[np.mean(diff * diff)]]), "mse", (pred, target), rule)


# ---------------------------------------------------------------------------
# structural


def concat(nodes: Iterable, axis: int = 1) -> TensorNode:
    nodes = tuple(as_node(n) for n in nodes)
    if not nodes:
        raise ShapeError("concat: nothing to concatenate")
    other = 1 - axis
    for n in nodes[1:]:
        if n.shape[other] != nodes[0].shape[other]:
            raise ShapeError(f"concat: incompatible shapes {nodes[0].shape} and {n.shape}")
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def rule(g):
        if axis == 1:
            return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(nodes))]
        return [g[bounds[i] : bounds[i + 1]] for i in range(len(nodes))]

    return _result(np.concatenate([n.value for n in nodes], axis=axis), "concat", nodes, rule)


def slice(a, rows=None, cols=None) -> TensorNode:  # noqa: A001 - op name
    """Contiguous sub-block ``a[rows, cols]`` where rows/cols are Python slices."""
    a = as_node(a)
    rows = rows if rows is not None else builtins.slice(None)
    cols = cols if cols is not None else builtins.slice(None)
    shape = a.shape
    value = a.value[rows, cols]
    if value.ndim != 2 or value.size == 0:
        raise ShapeError(f"slice: empty or invalid slice of shape {shape}")

    def rule(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _result(value, "slice", (a,), rule)



def take_rows(a, index) -> TensorNode:
    """Gather rows by integer index (used for batch permutations)."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.value[index], "take_rows", (a,), rule)


def transpose(a) -> TensorNode:
    a = as_node(a)
    return _result(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))
