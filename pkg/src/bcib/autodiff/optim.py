"""Adam / AdamW, global-norm clipping, and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .params import ParamSet


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, path: str):
        super().__init__(f"non-finite gradient in parameter {path!r}")
        self.path = path


@dataclass
class OptimState:
    kind: Literal["adam", "adamw"]
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def adam(lr: float = 1e-3, weight_decay: float = 0.0, **kw) -> OptimState:
    return OptimState("adam", lr, weight_decay, **kw)


def adamw(lr: float = 1e-3, weight_decay: float = 1e-2, **kw) -> OptimState:
    return OptimState("adamw", lr, weight_decay, **kw)


def optimizer_step(opt: OptimState, params: ParamSet, lr: float | None = None) -> None:
    """One Adam/AdamW update of every parameter from its current ``.grad``.

    Adam folds weight decay into the gradient (L2); AdamW shrinks the
    parameter directly by ``lr * weight_decay``. Gradients are left as-is.
    """
    lr = opt.lr if lr is None else lr
    for path, node in params.items():
        if not np.all(np.isfinite(node.grad)):
            raise NonFiniteGradientError(path)
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for path, node in params.items():
        g = node.grad
        if opt.kind == "adam" and opt.weight_decay:
            g = g + opt.weight_decay * node.value
        m = opt.m.get(path)
        if m is None:
            m = opt.m[path] = np.zeros_like(node.value)
            opt.v[path] = np.zeros_like(node.value)
        v = opt.v[path]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        value = node.value
        if opt.kind == "adamw" and opt.weight_decay:
            value = value * (1.0 - lr * opt.weight_decay)
        node.value = value - (lr / bc1) * m / (np.sqrt(v / bc2) + opt.eps)


def clip_grad_norm(params: ParamSet, max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(float(np.sum([np.sum(n.grad * n.grad) for n in params.values()])))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for node in params.values():
            node.grad = node.grad * scale
    return total


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    kind: Literal["cosine", "constant"] = "cosine"
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1 or not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need total_steps >= 1 and 0 <= warmup_steps < total_steps")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "constant":
        return schedule.base_lr
    if step < schedule.warmup_steps:
        return schedule.base_lr * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    frac = (step - schedule.warmup_steps) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
