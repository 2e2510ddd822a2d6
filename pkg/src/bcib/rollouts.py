"""Closed-loop evaluation from a seeded bank of initial conditions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import EnvSpec, EnvState, expert_policy, is_success, make_observation, proprio, reset, step
from .seeding import rng_for


@dataclass(frozen=True)
class EvalSettings:
    env_spec: EnvSpec
    episodes: int = 20
    seed_bank: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass
class EvalResult:
    success_rate: float
    episodes: int
    successes: int
    per_task: dict[int, float] = field(default_factory=dict)
    mean_episode_length: float = 0.0
    seed_bank: int = 0


class ExpertController:
    """Scripted expert behind the same evaluation interface as a learned policy."""

    def __call__(self, spec: EnvSpec, states: list[EnvState]) -> np.ndarray:
        return np.array([expert_policy(spec, s) for s in states])


def initial_conditions(spec: EnvSpec, episodes: int, seed_bank: int) -> list[tuple[EnvState, np.random.Generator]]:
    """Episode ``i`` gets task ``i % num_tasks`` and its own start/noise stream."""
    bank = []
    for i in range(episodes):
        rng = rng_for(seed_bank, "eval-episode", i)
        bank.append((reset(spec, rng, task=i % spec.num_tasks), rng))
    return bank


def evaluate(policy, env_spec: EnvSpec, episodes: int = 20, seed_bank: int = 0) -> EvalResult:
    """Run ``episodes`` rollouts in lockstep; success means the task check passes within ``max_steps``.

    ``policy`` is either a :class:`~bcib.policy.Policy` (acts on history
    windows) or a callable ``(spec, states) -> actions`` such as
    :class:`ExpertController`.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    windowed = hasattr(policy, "act_batch")
    if windowed:
        from .policy import WindowBatch

        cfg = policy.config
        if (cfg.obs_dim, cfg.state_dim, cfg.action_dim, cfg.num_tasks) != (
            env_spec.obs_dim,
            env_spec.state_dim,
            env_spec.action_dim,
            env_spec.num_tasks,
        ):
            raise ValueError(
                f"policy dims (obs {cfg.obs_dim}, state {cfg.state_dim}, action {cfg.action_dim}, tasks {cfg.num_tasks}) "
                f"do not match env (obs {env_spec.obs_dim}, state {env_spec.state_dim}, "
                f"action {env_spec.action_dim}, tasks {env_spec.num_tasks})"
            )
        tau = cfg.tau
    bank = initial_conditions(env_spec, episodes, seed_bank)
    states = [s for s, _ in bank]
    rngs = [r for _, r in bank]
    obs_hist: list[list[np.ndarray]] = [[] for _ in range(episodes)]
    prop_hist: list[list[np.ndarray]] = [[] for _ in range(episodes)]
    done = np.zeros(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    lengths = np.full(episodes, env_spec.max_steps)
    for t in range(env_spec.max_steps):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        for i in active:
            obs_hist[i].append(make_observation(states[i], env_spec, rngs[i]))
            prop_hist[i].append(proprio(states[i]))
        if windowed:
            idx = np.maximum(0, np.arange(t - tau + 1, t + 1))
            batch = WindowBatch(
                np.array([[obs_hist[i][j] for j in idx] for i in active]),
                np.array([[prop_hist[i][j] for j in idx] for i in active]),
                np.array([states[i].task for i in active]),
            )
            actions = policy.act_batch(batch)
        else:
            actions = policy(env_spec, [states[i] for i in active])
        for a, i in zip(actions, active):
            states[i] = step(env_spec, states[i], a)
            if is_success(env_spec, states[i]):
                done[i] = success[i] = True
                lengths[i] = t + 1
    tasks = np.arange(episodes) % env_spec.num_tasks
    per_task = {int(k): float(success[tasks == k].mean()) for k in np.unique(tasks)}
    wins = int(success.sum())
    return EvalResult(wins / episodes, episodes, wins, per_task, float(lengths.mean()), seed_bank)
