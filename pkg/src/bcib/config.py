"""Run configuration: TOML files merged with command-line overrides.

A file has one table per component plus two top-level keys::

    seed = 0
    out_dir = "runs/beta-sweep"

    [env]      # EnvSpec fields
    [policy]   # PolicyOptions fields
    [mine]     # MineConfig fields
    [train]    # TrainConfig fields except seed
    [eval]     # episodes, seed_bank
    [data]     # num_demos
    [probe]    # ProbeOptions fields

Every key is checked against the dataclass it configures; unknown keys and
ill-typed values are rejected before any work starts. The single ``seed``
feeds every component, each of which derives its own streams from it.
"""

from __future__ import annotations

import json
import os
import sys
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .envs import EnvSpec
from .mine import MineConfig
from .policy import FusionKind, PolicyConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUT_ENV_VAR = "BCIB_OUT"
DEFAULT_OUT = "bcib-out"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyOptions:
    """PolicyConfig minus the dimensions, which come from the environment."""

    e_o: int = 16
    e_s: int = 8
    e_l: int = 8
    tau: int = 3
    fusion: FusionKind = "spatial_mlp"
    latent_dim: int = 32
    fusion_hidden: int = 64
    attn_width: int = 64
    attn_layers: int = 2
    attn_heads: int = 2
    head_hidden: int = 64
    train_obs_encoder: bool = True
    train_state_encoder: bool = True
    train_lang_encoder: bool = True

    def build(self, env: EnvSpec, seed: int) -> PolicyConfig:
        return PolicyConfig.for_env(env, seed=seed, **asdict(self))


@dataclass(frozen=True)
class EvalOptions:
    episodes: int = 20
    seed_bank: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass(frozen=True)
class DataOptions:
    num_demos: int = 25

    def __post_init__(self):
        if self.num_demos < 1:
            raise ValueError("num_demos must be >= 1")


@dataclass(frozen=True)
class ProbeOptions:
    """Post-hoc MI probe: a fresh critic trained on a frozen policy's features."""

    steps: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: int = 64
    layers: int = 4
    average_last: int = 200

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2:
            raise ValueError("probe needs steps >= 1 and batch_size >= 2")
        if not 1 <= self.average_last <= self.steps:
            raise ValueError("probe average_last must be in [1, steps]")

    def mine_config(self) -> MineConfig:
        return MineConfig(layers=self.layers, hidden=self.hidden, lr=self.lr)


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec = field(default_factory=lambda: EnvSpec(noise_dims=16))
    policy: PolicyOptions = field(default_factory=PolicyOptions)
    mine: MineConfig = field(default_factory=lambda: MineConfig(lr=1e-3))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    data: DataOptions = field(default_factory=DataOptions)
    probe: ProbeOptions = field(default_factory=ProbeOptions)
    seed: int = 0
    out_dir: str = ""

    def policy_config(self) -> PolicyConfig:
        return self.policy.build(self.env, self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        return d

    def to_toml(self) -> str:
        """The effective configuration, rendered so it can be fed back with ``--config``."""
        d = self.to_dict()
        lines = [f"seed = {_toml_value(d.pop('seed'))}", f"out_dir = {_toml_value(d.pop('out_dir'))}"]
        for section, values in d.items():
            lines.append(f"\n[{section}]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in values.items())
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


SECTIONS = {
    "env": EnvSpec,
    "policy": PolicyOptions,
    "mine": MineConfig,
    "train": TrainConfig,
    "eval": EvalOptions,
    "data": DataOptions,
    "probe": ProbeOptions,
}
EXCLUDED = {("train", "seed")}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def _coerce(section: str, name: str, hint, value):
    origin = typing.get_origin(hint)
    if origin is typing.Literal:
        if value not in typing.get_args(hint):
            raise ConfigError(f"[{section}] {name} must be one of {list(typing.get_args(hint))}, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {name} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"[{section}] {name} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {name} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {name} must be a string, got {value!r}")
        return value
    return value


def _build_section(section: str, base, values: dict):
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in fields(cls)} - {n for s, n in EXCLUDED if s == section}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)} (allowed: {', '.join(sorted(allowed))})")
    typed = {k: _coerce(section, k, hints[k], v) for k, v in values.items()}
    try:
        return replace(base, **typed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def merge(base: RunConfig, data: dict) -> RunConfig:
    """Apply a nested mapping (parsed TOML or CLI overrides) on top of ``base``."""
    unknown = sorted(set(data) - set(SECTIONS) - {"seed", "out_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    updates = {}
    for section, values in data.items():
        if section in SECTIONS:
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            updates[section] = _build_section(section, getattr(base, section), values)
    if "seed" in data:
        updates["seed"] = _coerce("top", "seed", int, data["seed"])
    if "out_dir" in data:
        updates["out_dir"] = _coerce("top", "out_dir", str, data["out_dir"])
    return replace(base, **updates)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the TOML file (if any), then ``overrides``; the output dir falls back to ``$BCIB_OUT``."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        cfg = merge(cfg, data)
    if overrides:
        cfg = merge(cfg, overrides)
    if not cfg.out_dir:
        cfg = replace(cfg, out_dir=os.environ.get(OUT_ENV_VAR, DEFAULT_OUT))
    try:
        cfg.policy_config()
    except ValueError as exc:
        raise ConfigError(f"[policy] {exc}") from exc
    return cfg


def section_defaults() -> dict[str, dict]:
    base = RunConfig()
    return {name: asdict(getattr(base, name)) for name in SECTIONS}


__all__ = [
    "ConfigError",
    "DataOptions",
    "EvalOptions",
    "PolicyOptions",
    "ProbeOptions",
    "RunConfig",
    "load_config",
    "merge",
    "section_defaults",
]
