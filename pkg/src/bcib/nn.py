"""Linear layers and MLPs expressed over a ParamSet."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ParamSet, TensorNode
from .autodiff import ops

ACTIVATIONS = {"relu": ops.relu, "tanh": ops.tanh}


def fan_in_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(params: ParamSet, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True) -> None:
    params.add(f"{prefix}/w", fan_in_uniform(rng, fan_in, (fan_in, fan_out)))
    if bias:
        params.add(f"{prefix}/b", fan_in_uniform(rng, fan_in, (1, fan_out)))


def init_mlp(params: ParamSet, prefix: str, widths: Sequence[int], rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        init_linear(params, f"{prefix}/l{i}", a, b, rng)


def _get(params: ParamSet, path: str, frozen: bool) -> TensorNode:
    node = params[path]
    # Frozen reads see the same numbers but are constants, so no grad reaches the parameter.
    return TensorNode(node.value) if frozen else node


def linear(x: TensorNode, params: ParamSet, prefix: str, frozen: bool = False) -> TensorNode:
    out = ops.matmul(x, _get(params, f"{prefix}/w", frozen))
    if f"{prefix}/b" in params:
        out = ops.add(out, _get(params, f"{prefix}/b", frozen))
    return out


def mlp(
    x: TensorNode,
    params: ParamSet,
    prefix: str,
    depth: int,
    activation: str = "tanh",
    frozen: bool = False,
) -> TensorNode:
    """``depth`` linear layers with ``activation`` between them; the last layer is linear."""
    act = ACTIVATIONS[activation]
    for i in range(depth):
        x = linear(x, params, f"{prefix}/l{i}", frozen)
        if i < depth - 1:
            x = act(x)
    return x
