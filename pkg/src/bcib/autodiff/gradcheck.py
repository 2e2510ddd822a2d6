"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import TensorNode, no_grad


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [p for p, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from amplifying FD noise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(
    params: ParamSet,
    loss_fn: Callable[[], TensorNode],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> GradcheckReport:
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. With ``max_entries`` set, that many entries per parameter are
    sampled instead of checking all of them. Failures are reported, never raised.
    """
    report = GradcheckReport(tolerance)
    if not len(params):
        return report
    params.zero_grad()
    loss_fn().backward()
    analytic = {p: n.grad.copy() for p, n in params.items()}
    rng = np.random.default_rng(seed)
    for path, node in params.items():
        flat_idx = np.arange(node.value.size)
        if max_entries is not None and flat_idx.size > max_entries:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_entries, replace=False))
        base = node.value
        numeric = np.empty(flat_idx.size)
        for k, i in enumerate(flat_idx):
            idx = np.unravel_index(i, base.shape)
            bumped = base.copy()
            bumped[idx] += h
            node.value = bumped
            with no_grad():
                up = loss_fn().item()
            bumped = base.copy()
            bumped[idx] -= h
            node.value = bumped
            with no_grad():
                down = loss_fn().item()
            numeric[k] = (up - down) / (2 * h)
        node.value = base
        a = analytic[path].reshape(-1)[flat_idx]
        err = relative_error(a, numeric, floor)
        report.max_rel_error[path] = float(err.max()) if err.size else 0.0
    params.zero_grad()
    return report
