"""Random-input gradient checks for every registered op."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as ops
from .gradcheck import GradcheckReport, gradcheck
from .params import ParamSet
from .tensor import TensorNode

Case = Callable[[np.random.Generator], tuple[ParamSet, Callable[[], TensorNode]]]


def _away_from(rng: np.random.Generator, shape, kinks=(0.0,), margin=0.1) -> np.ndarray:
    x = rng.normal(size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-12) * margin * 2
    return x


def _weighted_sum(out: TensorNode, rng_w: np.ndarray) -> TensorNode:
    # random projection so every output entry gets a distinct upstream gradient
    return ops.sum(ops.mul(out, rng_w))


def _unary(op, make_input=None) -> Case:
    def build(rng):
        p = ParamSet()
        a = p.add("a", make_input(rng) if make_input else rng.normal(size=(3, 4)))
        w = rng.normal(size=op(TensorNode(a.value)).shape)
        return p, lambda: _weighted_sum(op(a), w)

    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4)) -> Case:
    def build(rng):
        p = ParamSet()
        a = p.add("a", rng.normal(size=shape_a))
        b = p.add("b", rng.normal(size=shape_b))
        out_shape = op(TensorNode(a.value), TensorNode(b.value)).shape
        w = rng.normal(size=out_shape)
        return p, lambda: _weighted_sum(op(a, b), w)

    return build


def _reduce(op) -> Case:
    def build(rng):
        p = ParamSet()
        a = p.add("a", rng.normal(size=(4, 3)))
        w0, w1 = rng.normal(size=(1, 3)), rng.normal(size=(4, 1))
        return p, lambda: ops.add(
            ops.add(op(a), _weighted_sum(op(a, axis=0), w0)), _weighted_sum(op(a, axis=1), w1)
        )

    return build


def _concat(rng):
    p = ParamSet()
    a = p.add("a", rng.normal(size=(3, 2)))
    b = p.add("b", rng.normal(size=(3, 4)))
    c = p.add("c", rng.normal(size=(2, 6)))
    w = rng.normal(size=(5, 6))
    return p, lambda: _weighted_sum(ops.concat([ops.concat([a, b], axis=1), c], axis=0), w)


def _slice(rng):
    p = ParamSet()
    a = p.add("a", rng.normal(size=(5, 6)))
    w = rng.normal(size=(2, 3))
    return p, lambda: _weighted_sum(ops.slice(a, slice(1, 3), slice(2, 5)), w)


def _take_rows(rng):
    p = ParamSet()
    a = p.add("a", rng.normal(size=(4, 3)))
    idx = np.array([2, 0, 2, 3, 1])
    w = rng.normal(size=(5, 3))
    return p, lambda: _weighted_sum(ops.take_rows(a, idx), w)


def _mse(rng):
    p = ParamSet()
    a = p.add("a", rng.normal(size=(4, 3)))
    b = p.add("b", rng.normal(size=(4, 3)))
    return p, lambda: ops.mse(a, b)


def _logsumexp(rng):
    p = ParamSet()
    a = p.add("a", rng.normal(size=(4, 3)) * 3)
    w = rng.normal(size=(4, 1))
    return p, lambda: ops.add(ops.logsumexp(a), _weighted_sum(ops.logsumexp(a, axis=1), w))


OP_CASES: dict[str, Case] = {
    "matmul": _binary(ops.matmul, (3, 4), (4, 2)),
    "add": _binary(ops.add, (3, 4), (1, 4)),
    "sub": _binary(ops.sub, (3, 1), (3, 4)),
    "mul": _binary(ops.mul, (3, 4), (3, 1)),
    "relu": _unary(ops.relu, lambda r: _away_from(r, (3, 4))),
    "tanh": _unary(ops.tanh),
    "sigmoid": _unary(ops.sigmoid),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "clip": _unary(lambda a: ops.clip(a, -0.5, 0.5), lambda r: _away_from(r, (3, 4), kinks=(-0.5, 0.5))),
    "mean": _reduce(ops.mean),
    "sum": _reduce(ops.sum),
    "logsumexp": _logsumexp,
    "softmax": _unary(ops.softmax),
    "mse": _mse,
    "concat": _concat,
    "slice": _slice,
    "take_rows": _take_rows,
    "transpose": _unary(ops.transpose),
}


def check_op(name: str, seed: int = 0, tolerance: float = 1e-4) -> GradcheckReport:
    params, loss_fn = OP_CASES[name](np.random.default_rng(seed))
    return gradcheck(params, loss_fn, tolerance)
