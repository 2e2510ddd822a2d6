"""Expert demonstrations: generation, few-shot subsetting, JSON Lines storage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import EnvSpec, expert_policy, is_success, make_observation, proprio, reset, step
from .seeding import rng_for

DATASET_VERSION = 1


class ExpertFailureError(RuntimeError):
    pass


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim)
    proprio: np.ndarray  # (T, state_dim)
    task_label: int
    actions: np.ndarray  # (T, action_dim)
    success: bool

    def __post_init__(self):
        n = len(self.observations)
        if not (len(self.proprio) == len(self.actions) == n) or n == 0:
            raise ValueError("trajectory sequences must be non-empty and of equal length")
        for arr in (self.observations, self.proprio, self.actions):
            if not np.all(np.isfinite(arr)):
                raise ValueError("trajectory contains non-finite values")

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    env_spec: EnvSpec
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def num_samples(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def labels(self) -> list[int]:
        return [t.task_label for t in self.trajectories]


def rollout_expert(spec: EnvSpec, rng: np.random.Generator, task: int) -> Trajectory:
    state = reset(spec, rng, task)
    obs, props, acts = [], [], []
    done = False
    while state.t < spec.max_steps and not done:
        obs.append(make_observation(state, spec, rng))
        props.append(proprio(state))
        action = expert_policy(spec, state)
        acts.append(action)
        state = step(spec, state, action)
        done = is_success(spec, state)
    return Trajectory(np.array(obs), np.array(props), task, np.array(acts), done)


def generate_dataset(spec: EnvSpec, num_demos: int, seed: int) -> Dataset:
    """``num_demos`` successful expert rollouts, task labels assigned round-robin.

    Demo ``i`` draws from its own stream keyed by ``(seed, i, attempt)``, so a
    shorter run is an exact prefix of a longer one. A failed rollout is retried
    with the next attempt index; more than 1% failures aborts.
    """
    if num_demos < 1:
        raise ValueError("num_demos must be >= 1")
    trajectories, failures = [], 0
    for i in range(num_demos):
        attempt = 0
        while True:
            traj = rollout_expert(spec, rng_for(seed, "demo", i, attempt), task=i % spec.num_tasks)
            if traj.success:
                break
            failures += 1
            attempt += 1
            if failures > 0.01 * num_demos:
                raise ExpertFailureError(f"expert failed {failures} times in {num_demos} demos; check the EnvSpec")
        trajectories.append(traj)
    return Dataset(trajectories, spec, seed, {"regenerated": failures})


def few_shot_subset(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Seeded subsample without replacement: ``k`` demos per task label, original order kept."""
    by_label: dict[int, list[int]] = {}
    for i, label in enumerate(dataset.labels()):
        by_label.setdefault(label, []).append(i)
    if k < 1 or any(k > len(idx) for idx in by_label.values()):
        smallest = min(len(v) for v in by_label.values())
        raise ValueError(f"k={k} outside [1, {smallest}] demos available per task")
    rng = rng_for(seed, "few-shot", k)
    chosen: list[int] = []
    for label in sorted(by_label):
        idx = by_label[label]
        chosen.extend(idx if k == len(idx) else rng.choice(idx, size=k, replace=False).tolist())
    chosen.sort()
    meta = dict(dataset.meta, subset={"k_per_task": k, "seed": seed, "indices": chosen})
    return Dataset([dataset.trajectories[i] for i in chosen], dataset.env_spec, dataset.seed, meta)


# ---------------------------------------------------------------------------
# JSON Lines: header line then one trajectory per line; floats at 17 significant digits.


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        raise ValueError(f"cannot serialise non-finite value {v}")
    s = format(v, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def _dump(obj) -> str:
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _dump(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dump(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_dump(obj[k])}" for k in sorted(obj)) + "}"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dataset_to_jsonl(dataset: Dataset) -> str:
    header = {"version": DATASET_VERSION, "env_spec": dataset.env_spec.to_dict(), "seed": dataset.seed, "meta": dataset.meta}
    lines = [_dump(header)]
    for t in dataset.trajectories:
        lines.append(
            _dump({"obs": t.observations, "state": t.proprio, "label": t.task_label, "actions": t.actions, "success": t.success})
        )
    return "\n".join(lines) + "\n"


def dataset_from_jsonl(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty dataset file")
    header = json.loads(lines[0])
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')!r}")
    spec = EnvSpec(**header["env_spec"])
    trajectories = []
    for line in lines[1:]:
        rec = json.loads(line)
        trajectories.append(
            Trajectory(
                np.array(rec["obs"], dtype=np.float64).reshape(-1, spec.obs_dim),
                np.array(rec["state"], dtype=np.float64).reshape(-1, spec.state_dim),
                int(rec["label"]),
                np.array(rec["actions"], dtype=np.float64).reshape(-1, spec.action_dim),
                bool(rec["success"]),
            )
        )
    return Dataset(trajectories, spec, header["seed"], header.get("meta", {}))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_jsonl(dataset), encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    return dataset_from_jsonl(Path(path).read_text(encoding="utf-8"))
