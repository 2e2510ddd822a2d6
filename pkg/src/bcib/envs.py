"""Point-mass manipulation tasks with scripted experts and nuisance observation dims.

Two kinds share a [-1, 1]^2 workspace and velocity control:

* ``reach``: drive the agent to the goal selected by the task label.
* ``pick_place``: move to the labelled object, close the gripper to latch it,
  carry it to the bowl and open the gripper there.

Policies see ``(obs, proprio, label)``. ``obs`` is the task-relevant relative
positions followed by ``noise_dims`` nuisance entries that carry nothing about
the expert action. The expert reads the true state only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

WORKSPACE = (-1.0, 1.0)
DRIFT_DECAY = 0.95

EnvKind = Literal["reach", "pick_place"]
NoiseKind = Literal["iid_gaussian", "slow_drift", "copy_of_state_with_noise"]


@dataclass(frozen=True)
class EnvSpec:
    kind: EnvKind = "reach"
    dt: float = 0.05
    max_steps: int = 100
    success_eps: float = 0.05
    noise_dims: int = 0
    noise_kind: NoiseKind = "iid_gaussian"
    num_tasks: int = 4
    a_max: float = 1.0
    gain: float = 2.0

    def __post_init__(self):
        if self.kind not in ("reach", "pick_place"):
            raise ValueError(f"unknown env kind {self.kind!r}")
        if self.noise_kind not in ("iid_gaussian", "slow_drift", "copy_of_state_with_noise"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.noise_dims < 0:
            raise ValueError("noise_dims must be >= 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.success_eps <= 0 or self.dt <= 0 or self.a_max <= 0:
            raise ValueError("success_eps, dt and a_max must be positive")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")

    @property
    def true_dim(self) -> int:
        return 2 * self.num_tasks + (2 if self.kind == "pick_place" else 0)

    @property
    def obs_dim(self) -> int:
        return self.true_dim + self.noise_dims

    @property
    def state_dim(self) -> int:
        return 3

    @property
    def action_dim(self) -> int:
        return 3 if self.kind == "pick_place" else 2

    def obs_layout(self) -> list[tuple[str, int]]:
        name = "goal" if self.kind == "reach" else "object"
        layout = [(f"{name}{i}_rel", 2) for i in range(self.num_tasks)]
        if self.kind == "pick_place":
            layout.append(("bowl_rel", 2))
        if self.noise_dims:
            layout.append((f"nuisance:{self.noise_kind}", self.noise_dims))
        return layout

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnvState:
    pos: np.ndarray
    task: int
    gripper: float = 0.0
    holding: int = -1
    objects: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bowl: np.ndarray = field(default_factory=lambda: np.zeros(2))
    drift: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0

    def copy(self) -> EnvState:
        return replace(self, pos=self.pos.copy(), objects=self.objects.copy(), bowl=self.bowl.copy(), drift=self.drift.copy())


def reach_goals(num_tasks: int) -> np.ndarray:
    """Fixed goals on a circle of radius 0.6, one per task label."""
    angles = math.pi / 4 + 2 * math.pi * np.arange(num_tasks) / num_tasks
    return 0.6 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _targets(spec: EnvSpec, state: EnvState) -> np.ndarray:
    return reach_goals(spec.num_tasks) if spec.kind == "reach" else state.objects


def reset(spec: EnvSpec, rng: np.random.Generator, task: int | None = None) -> EnvState:
    """Random initial condition that is not already successful."""
    task = int(rng.integers(spec.num_tasks)) if task is None else int(task)
    if not 0 <= task < spec.num_tasks:
        raise ValueError(f"task {task} outside [0, {spec.num_tasks})")
    drift = rng.standard_normal(spec.noise_dims) if spec.noise_kind == "slow_drift" else np.zeros(spec.noise_dims)
    if spec.kind == "reach":
        goal = reach_goals(spec.num_tasks)[task]
        while True:
            pos = rng.uniform(*WORKSPACE, size=2)
            if np.linalg.norm(pos - goal) >= 2 * spec.success_eps:
                return EnvState(pos=pos, task=task, drift=drift)
    while True:
        pts = rng.uniform(-0.7, 0.7, size=(spec.num_tasks + 1, 2))
        gaps = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts))
        if gaps.min() >= 0.3:
            break
    pos = rng.uniform(*WORKSPACE, size=2)
    return EnvState(pos=pos, task=task, objects=pts[:-1].copy(), bowl=pts[-1].copy(), drift=drift)


def clip_action(spec: EnvSpec, action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64), -spec.a_max, spec.a_max)


def step(spec: EnvSpec, state: EnvState, action) -> EnvState:
    """Advance one control step; inputs beyond ``a_max`` are clipped, never rejected."""
    a = clip_action(spec, action)
    nxt = state.copy()
    nxt.pos = np.clip(state.pos + spec.dt * a[:2], *WORKSPACE)
    nxt.t = state.t + 1
    if spec.kind == "pick_place":
        nxt.gripper = 1.0 if a[2] > 0 else 0.0
        if nxt.holding >= 0:
            if nxt.gripper == 0.0:
                nxt.holding = -1
            else:
                nxt.objects[nxt.holding] = nxt.pos
        elif nxt.gripper == 1.0 and state.gripper == 0.0:
            dists = np.linalg.norm(nxt.objects - nxt.pos, axis=1)
            nearest = int(np.argmin(dists))
            if dists[nearest] < spec.success_eps:
                nxt.holding = nearest
                nxt.objects[nearest] = nxt.pos
    return nxt


def is_success(spec: EnvSpec, state: EnvState) -> bool:
    if spec.kind == "reach":
        return bool(np.linalg.norm(state.pos - reach_goals(spec.num_tasks)[state.task]) < spec.success_eps)
    placed = np.linalg.norm(state.objects[state.task] - state.bowl) < spec.success_eps
    return bool(placed and state.holding < 0)


def expert_policy(spec: EnvSpec, state: EnvState) -> np.ndarray:
    """Proportional controller ``clip(gain * (target - pos))`` with pick/place phase logic."""
    if spec.kind == "reach":
        goal = reach_goals(spec.num_tasks)[state.task]
        return clip_action(spec, spec.gain * (goal - state.pos))
    if state.holding == state.task:
        d = state.bowl - state.pos
        grip = -1.0 if np.linalg.norm(d) < spec.success_eps else 1.0
    else:
        d = state.objects[state.task] - state.pos
        grip = 1.0 if np.linalg.norm(d) < spec.success_eps else -1.0
    v = clip_action(spec, spec.gain * d)
    return np.array([v[0], v[1], grip])


def proprio(state: EnvState) -> np.ndarray:
    return np.array([state.pos[0], state.pos[1], state.gripper])


def make_observation(state: EnvState, spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    """True relative positions followed by nuisance entries.

    ``slow_drift`` advances the AR(1) latent stored on ``state.drift`` in place
    (stationary N(0, 1) marginals); the other kinds leave ``state`` untouched.
    """
    rel = (_targets(spec, state) - state.pos).reshape(-1)
    if spec.kind == "pick_place":
        rel = np.concatenate([rel, state.bowl - state.pos])
    if spec.noise_dims == 0:
        return rel
    if spec.noise_kind == "iid_gaussian":
        nuisance = rng.standard_normal(spec.noise_dims)
    elif spec.noise_kind == "slow_drift":
        state.drift = DRIFT_DECAY * state.drift + math.sqrt(1 - DRIFT_DECAY**2) * rng.standard_normal(spec.noise_dims)
        nuisance = state.drift.copy()
    else:
        nuisance = state.pos[np.arange(spec.noise_dims) % 2] + 0.1 * rng.standard_normal(spec.noise_dims)
    return np.concatenate([rel, nuisance])
