"""Joint training of the policy and the MINE critic under the BC-IB objective.

Per step, on one minibatch and one marginal-permutation seed:

1. forward the policy once, giving flattened features ``x``, latent ``z`` and actions;
2. ``critic_steps_per_policy_step`` critic updates on the detached ``(x, z)``;
3. one policy update on ``mse(actions, targets) + beta * DV(x, z)`` with the
   critic frozen, global-norm clipping, and the scheduled learning rate.

With ``beta == 0`` the penalty never enters the policy graph, so the policy
follows the vanilla BC trajectory exactly while the critic keeps training.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, NamedTuple

import numpy as np

from .autodiff import LrSchedule, OptimState, TensorNode, adam, adamw, clip_grad_norm, lr_at, ops, optimizer_step
from .data import Dataset
from .mine import MineEstimator, critic_step, mi_penalty
from .policy import Policy, PolicyOutput, WindowBatch, build_samples
from .rollouts import EvalSettings, evaluate
from .seeding import derive_seed, rng_for

REPORT_HEADER = ["epoch", "bc_loss", "mi_estimate", "total_loss", "eval_success_rate", "lr", "seconds"]


class NumericalAbort(FloatingPointError):
    """Non-finite loss; ``last_good_step`` is the last step that completed cleanly."""

    def __init__(self, step: int, detail: str, report: TrainReport | None = None):
        super().__init__(f"non-finite value at step {step} ({detail}); last good step {step - 1}")
        self.step = step
        self.last_good_step = step - 1
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    policy_lr: float = 1e-3
    policy_weight_decay: float = 1e-4
    optimizer: Literal["adam", "adamw"] = "adamw"
    schedule: Literal["cosine", "constant"] = "cosine"
    warmup_steps: int = 0
    clip_norm: float = 100.0
    seed: int = 0
    model_selection: Literal["best_eval", "final_epoch"] = "final_epoch"
    eval_every: int = 5

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the marginal shuffle needs two rows)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.model_selection not in ("best_eval", "final_epoch"):
            raise ValueError(f"unknown model_selection {self.model_selection!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.policy_lr <= 0 or self.clip_norm <= 0:
            raise ValueError("policy_lr and clip_norm must be positive")


class Batch(NamedTuple):
    windows: WindowBatch
    actions: np.ndarray


@dataclass(frozen=True)
class LossParts:
    bc: float
    mi: float
    total: float


@dataclass(frozen=True)
class StepRecord:
    step: int
    bc_loss: float
    mi_estimate: float
    total_loss: float
    lr: float
    grad_norm: float


@dataclass
class EpochRecord:
    epoch: int
    bc_loss: float
    mi_estimate: float
    total_loss: float
    eval_success_rate: float | None
    lr: float
    seconds: float


@dataclass
class TrainReport:
    beta: float
    selection_rule: str
    records: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    selected_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for r in self.records:
            writer.writerow(
                [
                    r.epoch,
                    repr(r.bc_loss),
                    repr(r.mi_estimate),
                    repr(r.total_loss),
                    "" if r.eval_success_rate is None else repr(r.eval_success_rate),
                    repr(r.lr),
                    repr(r.seconds),
                ]
            )
        return buf.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @staticmethod
    def records_from_csv(text: str) -> list[EpochRecord]:
        rows = list(csv.DictReader(io.StringIO(text)))
        return [
            EpochRecord(
                int(r["epoch"]),
                float(r["bc_loss"]),
                float(r["mi_estimate"]),
                float(r["total_loss"]),
                None if r["eval_success_rate"] == "" else float(r["eval_success_rate"]),
                float(r["lr"]),
                float(r["seconds"]),
            )
            for r in rows
        ]


def bc_loss(policy: Policy, batch: Batch, out: PolicyOutput | None = None) -> TensorNode:
    """Squared action error averaged over the batch and action dimensions."""
    if len(batch.windows) == 0:
        raise ValueError("empty batch")
    out = out or policy.forward(batch.windows)
    return ops.mse(out.action, TensorNode(batch.actions))


def bcib_loss(
    policy: Policy,
    mine: MineEstimator | None,
    batch: Batch,
    beta: float,
    seed: int,
    out: PolicyOutput | None = None,
) -> tuple[TensorNode, LossParts]:
    """``bc_loss + beta * DV(x, z)`` from a single policy forward pass."""
    if len(batch.windows) < 2:
        raise ValueError("BC-IB needs a batch of at least 2 windows")
    out = out or policy.forward(batch.windows)
    bc = bc_loss(policy, batch, out)
    if mine is None:
        return bc, LossParts(bc.item(), math.nan, bc.item())
    if beta == 0:
        mi = mine.estimate(out.x.value, out.z.value, seed).value
        return bc, LossParts(bc.item(), mi, bc.item())
    penalty = mi_penalty(mine, out.x, out.z, seed)
    total = ops.add(bc, ops.mul(penalty, beta))
    return total, LossParts(bc.item(), penalty.item(), total.item())


def make_optimizer(cfg: TrainConfig) -> OptimState:
    if cfg.optimizer == "adamw":
        return adamw(lr=cfg.policy_lr, weight_decay=cfg.policy_weight_decay)
    return adam(lr=cfg.policy_lr, weight_decay=cfg.policy_weight_decay)


def step_seed(cfg: TrainConfig, step: int) -> int:
    return derive_seed(cfg.seed, "marginal-perm", step)


def train_step(
    policy: Policy,
    mine: MineEstimator | None,
    opt_policy: OptimState,
    batch: Batch,
    cfg: TrainConfig,
    step: int,
    lr: float | None = None,
) -> StepRecord:
    lr = cfg.policy_lr if lr is None else lr
    seed = step_seed(cfg, step)
    out = policy.forward(batch.windows)
    if mine is not None:
        for _ in range(mine.config.critic_steps_per_policy_step):
            critic_step(mine, out.x.value, out.z.value, seed)
    total, parts = bcib_loss(policy, mine, batch, cfg.beta, seed, out)
    if not math.isfinite(parts.total):
        raise NumericalAbort(step, f"bc={parts.bc}, mi={parts.mi}")
    policy.params.zero_grad()
    total.backward()
    trainable = policy.trainable_params()
    norm = clip_grad_norm(trainable, cfg.clip_norm)
    optimizer_step(opt_policy, trainable, lr)
    policy.params.zero_grad()
    return StepRecord(step, parts.bc, parts.mi, parts.total, lr, norm)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def fit(
    policy: Policy,
    mine: MineEstimator | None,
    dataset: Dataset,
    cfg: TrainConfig,
    eval_env: EvalSettings | None = None,
    clock: Callable[[], float] = time.perf_counter,
    report_path: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainReport:
    """Epoch loop with seeded shuffling, periodic evaluation and model selection.

    On return the policy holds the selected parameters: the best evaluated
    epoch (latest on ties) for ``best_eval``, the last epoch for ``final_epoch``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cfg.model_selection == "best_eval" and eval_env is None:
        raise ValueError("best_eval model selection needs an evaluation environment")
    windows, actions = build_samples(dataset, policy.config.tau)
    n = len(windows)
    if n < 2:
        raise ValueError("need at least 2 samples to train")
    steps_per_epoch = len(_batches(n, cfg.batch_size, np.random.default_rng(0)))
    schedule = LrSchedule(cfg.policy_lr, cfg.epochs * steps_per_epoch, cfg.schedule, cfg.warmup_steps)
    opt = make_optimizer(cfg)
    report = TrainReport(cfg.beta, cfg.model_selection)
    best: tuple[float, int, dict] | None = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        start = clock()
        epoch_lr = lr_at(schedule, step)
        recs = []
        for idx in _batches(n, cfg.batch_size, rng_for(cfg.seed, "epoch-shuffle", epoch)):
            try:
                rec = train_step(policy, mine, opt, Batch(windows.take(idx), actions[idx]), cfg, step, lr_at(schedule, step))
            except NumericalAbort as exc:
                exc.report = report
                if report_path is not None:
                    report.save_csv(report_path)
                raise
            recs.append(rec)
            report.steps.append(rec)
            step += 1
        sr = None
        if eval_env is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            sr = evaluate(policy, eval_env.env_spec, eval_env.episodes, eval_env.seed_bank).success_rate
            if cfg.model_selection == "best_eval" and (best is None or sr >= best[0]):
                best = (sr, epoch, policy.params.snapshot())
        record = EpochRecord(
            epoch,
            float(np.mean([r.bc_loss for r in recs])),
            float(np.mean([r.mi_estimate for r in recs])),
            float(np.mean([r.total_loss for r in recs])),
            sr,
            epoch_lr,
            clock() - start,
        )
        report.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    if cfg.model_selection == "best_eval" and best is not None:
        policy.params.load_snapshot(best[2])
        report.selected_epoch = best[1]
    else:
        report.selected_epoch = cfg.epochs
    if report_path is not None:
        report.save_csv(report_path)
    return report
