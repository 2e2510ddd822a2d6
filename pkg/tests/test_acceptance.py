"""End-to-end acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line (also collected in the
terminal summary). Sub-checks all run before the verdict so one line reports
every shortfall. Thresholds here are the release thresholds; do not relax them.
"""

from __future__ import annotations

import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcib.artifacts import emit_sweep
from bcib.config import RunConfig
from bcib.data import dataset_from_jsonl, dataset_to_jsonl, generate_dataset, save_dataset
from bcib.harness import compare_ib, few_shot_pool, sweep_beta, sweep_few_shot
from bcib.mine import MineConfig, MineEstimator, dv_bound, estimate_gaussian_mi, gaussian_mi_oracle, shuffle_marginals
from bcib.policy import Policy, build_samples, load_policy, policy_to_bytes, save_policy
from bcib.seeding import derive_seed, rng_for
from bcib.selfcheck import FUSION_KINDS, model_gradcheck
from bcib.trainer import Batch, _batches, fit, make_optimizer, train_step


class Criterion:
    def __init__(self, log: list[str], number: int, title: str):
        self.log, self.number, self.title = log, number, title
        self.checks: list[tuple[bool, str]] = []
        self.line = ""

    def check(self, ok: bool, description: str) -> bool:
        self.checks.append((bool(ok), description))
        return bool(ok)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(ok for ok, _ in self.checks)

    def __enter__(self) -> Criterion:
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            self.checks.append((False, f"{exc_type.__name__}: {exc}"))
        seconds = time.perf_counter() - self.start
        detail = "; ".join(d if ok else f"NOT MET: {d}" for ok, d in self.checks)
        self.line = f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number} ({self.title}): {detail} [{seconds:.1f}s]"
        self.log.append(self.line)
        print(self.line)
        return False


@pytest.fixture()
def criterion(criterion_log):
    def make(number: int, title: str) -> Criterion:
        return Criterion(criterion_log, number, title)

    return make


# ---------------------------------------------------------------------------
# 1. Gaussian MI oracle


def test_criterion_1_gaussian_mi_oracle(criterion):
    with criterion(1, "Gaussian MI oracle") as c:
        for rho, tol in ((0.0, 0.05), (0.8, 0.08)):
            start = time.perf_counter()
            est = estimate_gaussian_mi(rho, 1, steps=3000, batch_size=512, config=MineConfig(lr=1e-3), seed=0)
            seconds = time.perf_counter() - start
            oracle = gaussian_mi_oracle(rho)
            c.check(abs(est - oracle) <= tol, f"rho={rho}: {est:.4f} vs {oracle:.4f} (tol {tol})")
            c.check(seconds < 120, f"rho={rho} in {seconds:.0f}s (< 120s)")
        rhos = (0.0, 0.3, 0.6, 0.9)
        for seed in range(5):
            ests = [estimate_gaussian_mi(r, 1, steps=3000, batch_size=512, config=MineConfig(lr=1e-3), seed=seed) for r in rhos]
            c.check(all(a < b for a, b in zip(ests, ests[1:])), f"seed {seed} ranking " + " < ".join(f"{e:.3f}" for e in ests))
    assert c.passed, c.line


# ---------------------------------------------------------------------------
# 2. DV identities


def test_criterion_2_dv_identities(criterion):
    with criterion(2, "DV identities") as c:

        @settings(max_examples=100, deadline=None)
        @given(st.floats(-50, 50), st.integers(1, 200))
        def constant_critic(value, n):
            assert dv_bound([value] * n, [value] * n).value == 0.0

        @settings(max_examples=100, deadline=None)
        @given(st.integers(1, 64), st.integers(0, 2**32 - 1))
        def naive_agreement(n, seed):
            rng = np.random.default_rng(seed)
            j, m = rng.normal(scale=5, size=n), rng.normal(scale=5, size=n)
            naive = sum(j) / n - math.log(sum(math.exp(v) for v in m) / n)
            assert abs(dv_bound(j, m).value - naive) <= 1e-12

        @settings(max_examples=100, deadline=None)
        @given(st.integers(2, 64), st.integers(0, 2**32 - 1))
        def shuffle_multiset(n, seed):
            rng = np.random.default_rng(seed)
            x, z = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
            xs, zs = shuffle_marginals(x, z, seed)
            assert np.array_equal(xs, x)
            assert sorted(map(tuple, zs)) == sorted(map(tuple, z))

        start = time.perf_counter()
        for name, prop in (("constant critic is exactly 0", constant_critic), ("naive recomputation to 1e-12", naive_agreement), ("shuffle keeps row multiset", shuffle_multiset)):
            try:
                prop()
                c.check(True, name)
            except AssertionError as exc:
                c.check(False, f"{name}: {exc}")
        seconds = time.perf_counter() - start
        c.check(seconds < 5, f"{seconds:.2f}s (< 5s)")
    assert c.passed, c.line


# ---------------------------------------------------------------------------
# 3. beta = 0 equivalence


def test_criterion_3_beta_zero_equals_vanilla(criterion):
    with criterion(3, "beta=0 equals vanilla BC") as c:
        cfg = RunConfig()
        data = generate_dataset(cfg.env, cfg.data.num_demos, seed=0)
        pcfg = cfg.policy_config()
        windows, actions = build_samples(data, pcfg.tau)
        tcfg = replace(cfg.train_config(), beta=0.0)
        order = []
        epoch = 1
        while len(order) < 200:
            order.extend(_batches(len(windows), tcfg.batch_size, rng_for(tcfg.seed, "epoch-shuffle", epoch)))
            epoch += 1
        runs = {}
        for label, with_critic in (("ib", True), ("vanilla", False)):
            policy = Policy(pcfg)
            mine = MineEstimator(pcfg.flat_dim, pcfg.latent_dim, cfg.mine, seed=derive_seed(cfg.seed, "critic")) if with_critic else None
            opt = make_optimizer(tcfg)
            trail = []
            for step, idx in enumerate(order[:200]):
                train_step(policy, mine, opt, Batch(windows.take(idx), actions[idx]), tcfg, step)
                trail.append(policy_to_bytes(policy))
            runs[label] = trail
        same = sum(a == b for a, b in zip(runs["ib"], runs["vanilla"]))
        c.check(same == 200, f"{same}/200 steps bit-identical")
        c.check(runs["ib"][0] != runs["ib"][-1], "parameters moved")
    assert c.passed, c.line


# ---------------------------------------------------------------------------
# 4. full-model gradient check


def test_criterion_4_full_model_gradcheck(criterion):
    with criterion(4, "full-model gradcheck") as c:
        start = time.perf_counter()
        for kind in FUSION_KINDS:
            rep = model_gradcheck(kind, tolerance=1e-4)
            c.check(rep.passed, f"{kind} max rel err {rep.worst:.1e}" + ("" if rep.passed else f" in {rep.failures}"))
        seconds = time.perf_counter() - start
        c.check(seconds < 60, f"{seconds:.1f}s (< 60s)")
    assert c.passed, c.line


# ---------------------------------------------------------------------------
# 5. paired IB comparison on the redundant reach task


def test_criterion_5_ib_lowers_probe_mi(criterion):
    with criterion(5, "IB lowers probe MI, paired seeds") as c:
        start = time.perf_counter()
        cfg = RunConfig()
        assert cfg.env.kind == "reach" and cfg.env.noise_dims == 16 and cfg.data.num_demos == 25
        pairs = compare_ib(cfg, 1e-3, [0, 1, 2])
        for p in pairs:
            c.check(p.baseline.ok and p.treated.ok, f"seed {p.seed} runs completed")
            c.check(
                p.treated.final_mi < p.baseline.final_mi,
                f"seed {p.seed} probe MI {p.treated.final_mi:.3f} (beta=1e-3) vs {p.baseline.final_mi:.3f} (beta=0)"
                f", training-critic MI {p.treated.train_mi:.3f} vs {p.baseline.train_mi:.3f}",
            )
        sr_ib = np.mean([p.treated.success_rate for p in pairs])
        sr_bc = np.mean([p.baseline.success_rate for p in pairs])
        c.check(sr_ib >= sr_bc, f"mean success {sr_ib:.3f} vs {sr_bc:.3f}")
        seconds = time.perf_counter() - start
        c.check(seconds < 1800, f"{seconds:.0f}s (< 1800s)")
    assert c.passed, c.line


# ---------------------------------------------------------------------------
# 6. beta sweep


def test_criterion_6_beta_sweep(criterion, tmp_path):
    with criterion(6, "beta sweep") as c:
        cfg = RunConfig()
        data = generate_dataset(cfg.env, cfg.data.num_demos, seed=0)
        res = sweep_beta(cfg, [0.0, 1e-4, 1e-3, 1e-2], [0, 1, 2], data)
        c.check(not res.failures, f"{len(res.runs) - len(res.failures)}/12 runs completed")
        base = res.point(0.0).mean_success
        best = max((p for p in res.points if p.value > 0), key=lambda p: p.mean_success)
        c.check(best.mean_success >= base, f"best nonzero beta={best.value:g} success {best.mean_success:.3f} vs beta=0 {base:.3f}")
        files = {f.name for f in emit_sweep(res, tmp_path)}
        c.check({"sweep_beta.csv", "sweep_beta.svg"} <= files, "CSV and SVG written")
        c.check(len((tmp_path / "sweep_beta.csv").read_text().splitlines()) == 13, "CSV has 12 run rows")
    assert c.passed, c.line


# ---------------------------------------------------------------------------
# 7. few-shot sweep


FEW_SHOT_COUNTS = [1, 5, 10, 20]


@pytest.fixture(scope="module")
def few_shot_runs():
    """IB sweep over every count plus the vanilla baseline at 10 demos per task, same pool and seeds."""
    cfg = RunConfig()
    pool = few_shot_pool(cfg, max(FEW_SHOT_COUNTS))
    start = time.perf_counter()
    ib = sweep_few_shot(cfg, FEW_SHOT_COUNTS, [0, 1, 2], pool)
    vanilla = sweep_few_shot(replace(cfg, train=replace(cfg.train, beta=0.0)), [10], [0, 1, 2], pool)
    return cfg, ib, vanilla, time.perf_counter() - start


def test_criterion_7_few_shot(criterion, few_shot_runs, tmp_path):
    with criterion(7, "few-shot sweep") as c:
        cfg, ib, vanilla, seconds = few_shot_runs
        c.check(True, f"sweeps ran in {seconds:.0f}s")
        c.check(not ib.failures and [p.value for p in ib.points] == [float(k) for k in FEW_SHOT_COUNTS], "all four counts completed")
        sr_ib, sr_bc = ib.point(10).mean_success, vanilla.point(10).mean_success
        c.check(sr_ib >= sr_bc, f"count=10 success IB(beta={cfg.train.beta:g}) {sr_ib:.3f} vs vanilla {sr_bc:.3f}")
        curve = ", ".join(f"{int(p.value)}:{p.mean_success:.2f}" for p in ib.points)
        c.check(True, f"IB success by demos/task {curve}")
        emit_sweep(ib, tmp_path)
        c.check((tmp_path / "sweep_demos.csv").exists() and (tmp_path / "sweep_demos.svg").exists(), "CSV and SVG written")
    assert c.passed, c.line


def test_few_shot_success_grows_with_demos(few_shot_runs):
    # four points give three adjacent comparisons; all of them must be non-decreasing
    _, ib, _, _ = few_shot_runs
    rates = [p.mean_success for p in ib.points]
    assert all(b >= a for a, b in zip(rates, rates[1:])), rates


# ---------------------------------------------------------------------------
# 8. determinism and round trips


def _train_once(cfg: RunConfig, data):
    pcfg = cfg.policy_config()
    policy = Policy(pcfg)
    mine = MineEstimator(pcfg.flat_dim, pcfg.latent_dim, cfg.mine, seed=derive_seed(cfg.seed, "critic"))
    report = fit(policy, mine, data, cfg.train_config(), clock=lambda: 0.0)
    return policy, mine, report


def test_criterion_8_determinism_and_round_trips(criterion, tmp_path):
    with criterion(8, "determinism and round trips") as c:
        cfg = replace(RunConfig(), train=replace(RunConfig().train, beta=1e-3, epochs=3))
        a = generate_dataset(cfg.env, 10, seed=5)
        b = generate_dataset(cfg.env, 10, seed=5)
        text = dataset_to_jsonl(a)
        c.check(text == dataset_to_jsonl(b), "datasets byte-identical")
        c.check(dataset_to_jsonl(dataset_from_jsonl(text)) == text, "JSONL round trip byte-exact")

        (p1, m1, r1), (p2, m2, r2) = _train_once(cfg, a), _train_once(cfg, a)
        c.check(policy_to_bytes(p1) == policy_to_bytes(p2), "checkpoints byte-identical")
        c.check(r1.to_csv() == r2.to_csv(), "reports byte-identical")
        save_policy(tmp_path / "p.bin", p1)
        save_policy(tmp_path / "q.bin", load_policy(tmp_path / "p.bin"))
        c.check((tmp_path / "p.bin").read_bytes() == (tmp_path / "q.bin").read_bytes(), "policy checkpoint round trip byte-exact")
        m1.save(tmp_path / "m.bin")
        MineEstimator.load(tmp_path / "m.bin").save(tmp_path / "n.bin")
        c.check((tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes(), "critic checkpoint round trip byte-exact")
        save_dataset(a, tmp_path / "d.jsonl")
        c.check((tmp_path / "d.jsonl").read_text() == text, "dataset file matches serialisation")

        start = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "bcib.cli", "selfcheck", "--fast"], cwd=tmp_path, capture_output=True, text=True)
        seconds = time.perf_counter() - start
        c.check(proc.returncode == 0, f"selfcheck --fast exit {proc.returncode}")
        c.check(seconds < 30, f"selfcheck --fast in {seconds:.1f}s (< 30s)")
    assert c.passed, c.line
