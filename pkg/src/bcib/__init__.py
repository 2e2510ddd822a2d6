"""Behavior cloning with a mutual-information bottleneck, built on a small numpy autodiff engine."""

from __future__ import annotations

from .config import RunConfig, load_config
from .data import Dataset, Trajectory, few_shot_subset, generate_dataset, load_dataset, save_dataset
from .envs import EnvSpec
from .harness import compare_ib, sweep_beta, sweep_few_shot, track_mi, train_and_measure
from .mine import MineConfig, MineEstimator, critic_step, dv_bound, estimate_gaussian_mi, gaussian_mi_oracle, mi_penalty
from .policy import Policy, PolicyConfig, build_samples, history_window, load_policy, save_policy
from .rollouts import evaluate
from .trainer import NumericalAbort, TrainConfig, TrainReport, bc_loss, bcib_loss, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EnvSpec",
    "MineConfig",
    "MineEstimator",
    "NumericalAbort",
    "Policy",
    "PolicyConfig",
    "RunConfig",
    "TrainConfig",
    "TrainReport",
    "Trajectory",
    "bc_loss",
    "bcib_loss",
    "build_samples",
    "compare_ib",
    "critic_step",
    "dv_bound",
    "estimate_gaussian_mi",
    "evaluate",
    "few_shot_subset",
    "fit",
    "gaussian_mi_oracle",
    "generate_dataset",
    "history_window",
    "load_config",
    "load_dataset",
    "load_policy",
    "mi_penalty",
    "save_dataset",
    "save_policy",
    "sweep_beta",
    "sweep_few_shot",
    "track_mi",
    "train_and_measure",
    "train_step",
]
