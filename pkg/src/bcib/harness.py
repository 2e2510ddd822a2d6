"""Analyses on top of the trainer: post-hoc MI probes and seeded sweeps over beta or demo count.

Each sweep cell is one ``(axis value, seed)`` pair: a full :func:`~bcib.trainer.fit`
followed by closed-loop evaluation and a probe measurement. Cells share the
dataset (or the few-shot pool), the evaluation bank and, for a given seed,
the initial policy and critic parameters, so cells with the same seed differ
only along the swept axis.
"""

from __future__ import annotations

import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .config import ProbeOptions, RunConfig
from .data import Dataset, few_shot_subset, generate_dataset
from .mine import MineEstimator, critic_step
from .policy import Policy, build_samples
from .rollouts import EvalSettings, evaluate
from .seeding import derive_seed, rng_for
from .trainer import NumericalAbort, TrainReport, fit

Axis = Literal["beta", "demos"]


def standardize(a: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns; constant columns are only centred."""
    sd = a.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (a - a.mean(axis=0)) / sd


def track_mi(
    policy: Policy,
    dataset: Dataset,
    probe: ProbeOptions = ProbeOptions(),
    seed: int = 0,
    mine_probe: MineEstimator | None = None,
) -> float:
    """Post-hoc I(X;Z) of a frozen policy, measured by a freshly initialised critic.

    The probe trains on random minibatches of the policy's ``(x, z)`` features
    over every window of ``dataset``. Columns are standardised first, which
    leaves mutual information unchanged but makes the probe insensitive to
    feature scale. The result is the mean pre-step DV estimate over the last
    ``probe.average_last`` steps.
    """
    windows, _ = build_samples(dataset, policy.config.tau)
    x, z = policy.features(windows)
    n = len(x)
    if n < 2:
        raise ValueError("need at least 2 windows to estimate MI")
    x, z = standardize(x), standardize(z)
    est = mine_probe or MineEstimator(x.shape[1], z.shape[1], probe.mine_config(), seed=derive_seed(seed, "probe-init"))
    rng = rng_for(seed, "probe-batches")
    batch = min(probe.batch_size, n)
    trace = []
    for s in range(probe.steps):
        idx = rng.choice(n, size=batch, replace=False)
        trace.append(critic_step(est, x[idx], z[idx], derive_seed(seed, "probe-perm", s)))
    return float(np.mean(trace[-probe.average_last :]))


# ---------------------------------------------------------------------------
# Single runs


@dataclass(frozen=True)
class RunResult:
    axis: str
    value: float
    seed: int
    success_rate: float = math.nan
    final_mi: float = math.nan
    train_mi: float = math.nan
    selected_epoch: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @property
    def key(self) -> tuple[str, float, int]:
        return (self.axis, float(self.value), int(self.seed))


@dataclass
class RunOutput:
    """Everything a single training run produces, for callers that need more than the summary."""

    policy: Policy
    mine: MineEstimator
    report: TrainReport
    success_rate: float
    probe_mi: float


def train_and_measure(cfg: RunConfig, dataset: Dataset, probe: bool = True) -> RunOutput:
    """Fit a fresh policy and critic on ``dataset``, then evaluate and probe the result."""
    pcfg = cfg.policy_config()
    policy = Policy(pcfg)
    mine = MineEstimator(pcfg.flat_dim, pcfg.latent_dim, cfg.mine, seed=derive_seed(cfg.seed, "critic"))
    eval_settings = EvalSettings(cfg.env, cfg.eval.episodes, cfg.eval.seed_bank)
    report = fit(policy, mine, dataset, cfg.train_config(), eval_settings)
    sr = evaluate(policy, cfg.env, cfg.eval.episodes, cfg.eval.seed_bank).success_rate
    mi = track_mi(policy, dataset, cfg.probe, seed=cfg.seed) if probe else math.nan
    return RunOutput(policy, mine, report, sr, mi)


def run_cell(cfg: RunConfig, axis: str, value: float, seed: int, dataset: Dataset) -> RunResult:
    """One sweep cell; failures are captured in ``RunResult.error`` instead of raised."""
    try:
        run_cfg = cfg.with_seed(seed)
        if axis == "beta":
            run_cfg = replace(run_cfg, train=replace(run_cfg.train, beta=float(value)))
            data = dataset
        elif axis == "demos":
            data = few_shot_subset(dataset, int(value), derive_seed(seed, "subset"))
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        out = train_and_measure(run_cfg, data)
        return RunResult(
            axis,
            float(value),
            seed,
            out.success_rate,
            out.probe_mi,
            out.report.records[-1].mi_estimate,
            int(out.report.selected_epoch),
        )
    except NumericalAbort as exc:
        return RunResult(axis, float(value), seed, error=f"numerical abort: {exc}")
    except Exception as exc:  # noqa: BLE001 - a sweep records failures and continues
        detail = traceback.format_exception_only(type(exc), exc)[-1].strip()
        return RunResult(axis, float(value), seed, error=detail)


# ---------------------------------------------------------------------------
# Sweeps


@dataclass(frozen=True)
class SweepPoint:
    value: float
    mean_success: float
    sd_success: float | None
    mean_final_mi: float
    seeds: tuple[int, ...]


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]
    seeds: tuple[int, ...]
    runs: list[RunResult]

    @property
    def failures(self) -> list[RunResult]:
        return [r for r in self.runs if not r.ok]

    def point(self, value: float) -> SweepPoint:
        for p in self.points:
            if p.value == float(value):
                return p
        raise KeyError(value)


def aggregate(axis: str, runs: Iterable[RunResult], seeds: Iterable[int]) -> SweepResult:
    """Group successful runs by axis value (sorted); sample sd only with two or more seeds."""
    runs = sorted(runs, key=lambda r: (r.value, r.seed))
    points = []
    for value in sorted({r.value for r in runs if r.ok}):
        group = [r for r in runs if r.ok and r.value == value]
        sr = np.array([r.success_rate for r in group])
        points.append(
            SweepPoint(
                value,
                float(sr.mean()),
                float(sr.std(ddof=1)) if len(group) >= 2 else None,
                float(np.mean([r.final_mi for r in group])),
                tuple(r.seed for r in group),
            )
        )
    return SweepResult(axis, points, tuple(seeds), runs)


class ResumeLog:
    """Append-only JSON Lines record of finished cells, tied to one configuration.

    Line 1 holds the configuration fingerprint plus the axis and the dataset
    identity; reopening with a different configuration is refused rather than
    silently mixing results.
    """

    def __init__(self, path: str | Path, header: dict):
        self.path = Path(path)
        self.header = header
        self.done: dict[tuple[str, float, int], RunResult] = {}
        if self.path.exists() and self.path.stat().st_size:
            lines = self.path.read_text(encoding="utf-8").splitlines()
            if json.loads(lines[0]) != header:
                raise ValueError(f"resume file {self.path} was written by a different sweep configuration")
            for line in lines[1:]:
                if line.strip():
                    r = RunResult(**json.loads(line))
                    if r.ok:
                        self.done[r.key] = r
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")

    def record(self, result: RunResult) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(result), sort_keys=True) + "\n")
        if result.ok:
            self.done[result.key] = result


def _run_cells(cfg, axis, values, seeds, dataset, jobs, resume, log) -> SweepResult:
    values = [float(v) for v in values]
    seeds = [int(s) for s in seeds]
    if not values:
        raise ValueError("sweep needs at least one axis value")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    cells = [(v, s) for v in values for s in seeds]
    journal = None
    if resume is not None:
        header = {"axis": axis, "config": cfg.fingerprint(), "dataset_seed": dataset.seed, "dataset_size": len(dataset)}
        journal = ResumeLog(resume, json.loads(json.dumps(header, sort_keys=True)))
    results: dict[tuple[float, int], RunResult] = {}
    pending = []
    for v, s in cells:
        if journal is not None and (axis, v, s) in journal.done:
            results[(v, s)] = journal.done[(axis, v, s)]
            log(f"skip {axis}={v:g} seed={s} (already in resume file)")
        else:
            pending.append((v, s))

    def finish(res: RunResult) -> None:
        results[(res.value, res.seed)] = res
        if journal is not None:
            journal.record(res)
        status = f"success_rate={res.success_rate:.3f} final_mi={res.final_mi:.4f}" if res.ok else f"FAILED: {res.error}"
        log(f"{axis}={res.value:g} seed={res.seed}: {status}")

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, axis, v, s, dataset) for v, s in pending]
            for fut in futures:
                finish(fut.result())
    else:
        for v, s in pending:
            finish(run_cell(cfg, axis, v, s, dataset))
    return aggregate(axis, [results[c] for c in cells], seeds)


def _quiet(msg: str) -> None:
    pass


def sweep_beta(
    cfg: RunConfig,
    betas: Iterable[float],
    seeds: Iterable[int],
    dataset: Dataset,
    jobs: int = 1,
    resume: str | Path | None = None,
    log=_quiet,
) -> SweepResult:
    """Fit and evaluate every ``(beta, seed)`` pair on one shared dataset; beta 0 is the vanilla baseline."""
    return _run_cells(cfg, "beta", list(betas), list(seeds), dataset, jobs, resume, log)


def few_shot_pool(cfg: RunConfig, max_per_task: int, data_seed: int | None = None) -> Dataset:
    """Expert pool with ``max_per_task`` demos per task, the superset every few-shot subset draws from."""
    seed = cfg.seed if data_seed is None else data_seed
    return generate_dataset(cfg.env, max_per_task * cfg.env.num_tasks, seed)


def sweep_few_shot(
    cfg: RunConfig,
    demo_counts: Iterable[int],
    seeds: Iterable[int],
    pool: Dataset | None = None,
    jobs: int = 1,
    resume: str | Path | None = None,
    log=_quiet,
) -> SweepResult:
    """Per demo count ``k`` (demos per task): subset the pool, fit, evaluate.

    The subset for seed ``s`` depends only on ``(s, k)``, so runs that differ
    only in beta train on identical demonstrations.
    """
    counts = [int(k) for k in demo_counts]
    if not counts or min(counts) < 1:
        raise ValueError("demo counts must be positive")
    pool = pool or few_shot_pool(cfg, max(counts))
    return _run_cells(cfg, "demos", counts, list(seeds), pool, jobs, resume, log)


@dataclass(frozen=True)
class PairedRun:
    seed: int
    baseline: RunResult
    treated: RunResult


def compare_ib(cfg: RunConfig, beta: float, seeds: Iterable[int], baseline_beta: float = 0.0, log=_quiet) -> list[PairedRun]:
    """Paired runs at ``baseline_beta`` and ``beta`` per seed.

    Seed ``s`` generates its own ``cfg.data.num_demos``-demo dataset, and both
    members of the pair share it along with the initial parameters, the
    shuffling order and the probe seed.
    """
    pairs = []
    for s in seeds:
        data = generate_dataset(cfg.env, cfg.data.num_demos, int(s))
        runs = []
        for b in (baseline_beta, beta):
            res = run_cell(cfg, "beta", b, int(s), data)
            status = f"success_rate={res.success_rate:.3f} probe_mi={res.final_mi:.4f}" if res.ok else f"FAILED: {res.error}"
            log(f"beta={b:g} seed={s}: {status}")
            runs.append(res)
        pairs.append(PairedRun(int(s), runs[0], runs[1]))
    return pairs
