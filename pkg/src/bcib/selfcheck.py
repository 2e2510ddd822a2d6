"""Release gate: gradient checks, DV identities and a Gaussian MI smoke test.

Each check returns a :class:`CheckResult`; :func:`run_selfcheck` runs them in
order and never stops early, so one report lists every failure.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import GradcheckReport, gradcheck
from .autodiff.opcheck import OP_CASES, check_op
from .data import generate_dataset
from .envs import EnvSpec
from .mine import MineConfig, MineEstimator, dv_bound, estimate_gaussian_mi, gaussian_mi_oracle, mi_penalty, shuffle_marginals
from .policy import Policy, PolicyConfig, build_samples
from .trainer import Batch, bcib_loss

FUSION_KINDS = ("spatial_mlp", "temporal_rnn", "temporal_attn")


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # noqa: BLE001 - a gate reports, it does not crash
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - start)


def _report_detail(report: GradcheckReport) -> str:
    if report.passed:
        return f"max rel err {report.worst:.2e}"
    return f"max rel err {report.worst:.2e} in {', '.join(report.failures)}"


def tiny_model(fusion: str, seed: int = 0, batch: int = 6) -> tuple[Policy, MineEstimator, Batch]:
    """A small policy, critic and real demonstration batch for full-model gradient checks."""
    spec = EnvSpec(noise_dims=2, num_tasks=2)
    cfg = PolicyConfig.for_env(
        spec,
        e_o=4,
        e_s=3,
        e_l=2,
        tau=2,
        fusion=fusion,
        latent_dim=5,
        fusion_hidden=6,
        attn_width=8,
        attn_layers=1,
        attn_heads=2,
        head_hidden=6,
        seed=seed,
    )
    policy = Policy(cfg)
    mine = MineEstimator(cfg.flat_dim, cfg.latent_dim, MineConfig(hidden=8), seed=seed)
    windows, actions = build_samples(generate_dataset(spec, 2, seed), cfg.tau)
    idx = np.random.default_rng(seed).choice(len(windows), size=batch, replace=False)
    return policy, mine, Batch(windows.take(idx), actions[idx])


def model_gradcheck(fusion: str, seed: int = 0, beta: float = 0.5, tolerance: float = 1e-4) -> GradcheckReport:
    """Finite-difference check of ``bc + beta * mi_penalty`` against every policy parameter.

    A large beta keeps the penalty path's contribution well above the
    finite-difference noise floor.
    """
    policy, mine, batch = tiny_model(fusion, seed)
    return gradcheck(policy.params, lambda: bcib_loss(policy, mine, batch, beta, seed=seed)[0], tolerance)


def check_ops(tolerance: float = 1e-4) -> tuple[bool, str]:
    bad = []
    worst = 0.0
    for name in OP_CASES:
        rep = check_op(name, seed=0, tolerance=tolerance)
        worst = max(worst, rep.worst)
        if not rep.passed:
            bad.append(name)
    if bad:
        return False, f"gradient mismatch in op(s): {', '.join(bad)}"
    return True, f"{len(OP_CASES)} ops, max rel err {worst:.2e}"


def check_dv_identities() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    for c in (-30.0, 0.0, 7.5, 50.0):
        v = dv_bound(np.full(9, c), np.full(9, c)).value
        if v != 0.0:
            return False, f"constant critic {c} gave {v!r}, expected exactly 0"
    if dv_bound([1.0, 1.0], [0.0, 0.0]).value != 1.0:
        return False, "joint=[1,1], marginal=[0,0] did not give 1"
    j, m = rng.normal(size=32), rng.normal(size=32)
    naive = j.mean() - math.log(np.mean(np.exp(m)))
    err = abs(dv_bound(j, m).value - naive)
    if err > 1e-12:
        return False, f"dv_bound differs from the naive formula by {err:.2e}"
    x, z = rng.normal(size=(16, 2)), rng.normal(size=(16, 3))
    xs, zs = shuffle_marginals(x, z, seed=3)
    same = np.array_equal(xs, x) and np.array_equal(np.sort(zs, axis=0), np.sort(z, axis=0))
    if not same:
        return False, "marginal shuffle changed x or the z row multiset"
    return True, "constant critic 0, [1,1]/[0,0] = 1, naive agreement, shuffle multiset"


def check_penalty_stop_gradient() -> tuple[bool, str]:
    policy, mine, batch = tiny_model("spatial_mlp")
    out = policy.forward(batch.windows)
    mine.params.zero_grad()
    ops.mul(mi_penalty(mine, out.x, out.z, seed=0), 1.0).backward()
    leaked = [p for p, n in mine.params.items() if np.any(n.grad != 0)]
    if leaked:
        return False, f"critic received gradient through the penalty: {', '.join(leaked)}"
    return True, "critic gradients exactly zero"


def check_gaussian(rho: float, tolerance: float, steps: int = 3000) -> tuple[bool, str]:
    oracle = gaussian_mi_oracle(rho, 1)
    est = estimate_gaussian_mi(rho, dims=1, steps=steps, batch_size=512, seed=0)
    gap = abs(est - oracle)
    return gap <= tolerance, f"estimate {est:.4f} vs oracle {oracle:.4f} (gap {gap:.4f}, tolerance {tolerance})"


def selfcheck_plan(fast: bool) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    plan: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
        ("op gradients", check_ops),
        ("DV identities", check_dv_identities),
        ("penalty stop-gradient", check_penalty_stop_gradient),
    ]
    for kind in FUSION_KINDS:

        def run(kind=kind):
            rep = model_gradcheck(kind)
            return rep.passed, _report_detail(rep)

        plan.append((f"model gradient ({kind})", run))
    if not fast:
        plan.append(("Gaussian MI rho=0", lambda: check_gaussian(0.0, 0.05)))
        plan.append(("Gaussian MI rho=0.8", lambda: check_gaussian(0.8, 0.08)))
    return plan


def run_selfcheck(fast: bool = False, log: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in selfcheck_plan(fast):
        res = _timed(name, fn)
        results.append(res)
        if log is not None:
            log(f"[{'PASS' if res.passed else 'FAIL'}] {res.name}: {res.detail} ({res.seconds:.1f}s)")
    return results
