"""Multi-modal BC policy: modality encoders -> concatenated features -> fusion -> MLP head.

Batched tensors are laid out step-major: a batch of ``B`` windows of length
``tau`` becomes ``tau * B`` rows, rows ``[t*B, (t+1)*B)`` holding step ``t``
of every window. Flattening for spatial fusion (and for the X side of the
information penalty) concatenates those row blocks along columns.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np

from .autodiff import ParamSet, ShapeError, TensorNode, load_params, no_grad, ops, params_to_bytes
from .data import Dataset, Trajectory
from .envs import EnvSpec
from .nn import init_linear, init_mlp, linear, mlp
from .seeding import rng_for

FusionKind = Literal["spatial_mlp", "temporal_rnn", "temporal_attn"]
ENCODER_PREFIXES = {"obs": "enc/obs/", "state": "enc/state/", "lang": "enc/lang/"}


@dataclass(frozen=True)
class PolicyConfig:
    obs_dim: int
    state_dim: int
    num_tasks: int
    action_dim: int
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
    seed: int = 0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.action_dim < 1:
            raise ValueError("action_dim must be >= 1")
        if self.fusion not in ("spatial_mlp", "temporal_rnn", "temporal_attn"):
            raise ValueError(f"unknown fusion kind {self.fusion!r}")
        if min(self.obs_dim, self.state_dim, self.num_tasks, self.e_o, self.e_s, self.e_l, self.latent_dim) < 1:
            raise ValueError("dimensions must be positive")
        if self.attn_width % self.attn_heads:
            raise ValueError("attn_width must be divisible by attn_heads")

    @classmethod
    def for_env(cls, spec: EnvSpec, **overrides) -> PolicyConfig:
        return cls(spec.obs_dim, spec.state_dim, spec.num_tasks, spec.action_dim, **overrides)

    @property
    def feature_dim(self) -> int:
        return self.e_o + self.e_s + self.e_l

    @property
    def flat_dim(self) -> int:
        return self.tau * self.feature_dim


class WindowBatch(NamedTuple):
    obs: np.ndarray  # (B, tau, obs_dim)
    state: np.ndarray  # (B, tau, state_dim)
    label: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return len(self.label)

    def take(self, idx) -> WindowBatch:
        return WindowBatch(self.obs[idx], self.state[idx], self.label[idx])


class PolicyOutput(NamedTuple):
    x: TensorNode  # (B, tau * feature_dim) flattened concatenated features
    z: TensorNode  # (B, latent_dim)
    action: TensorNode  # (B, action_dim)


def history_window(traj: Trajectory, t: int, tau: int) -> WindowBatch:
    """Steps ``t-tau+1 .. t`` of ``traj``; early steps are left-padded by repeating step 0."""
    if not 0 <= t < len(traj):
        raise IndexError(f"t={t} outside trajectory of length {len(traj)}")
    idx = np.maximum(0, np.arange(t - tau + 1, t + 1))
    return WindowBatch(traj.observations[idx][None], traj.proprio[idx][None], np.array([traj.task_label]))


def build_samples(dataset: Dataset, tau: int) -> tuple[WindowBatch, np.ndarray]:
    """Every (window, expert action) pair in the dataset, trajectory by trajectory."""
    obs, state, label, actions = [], [], [], []
    for traj in dataset.trajectories:
        T = len(traj)
        idx = np.maximum(0, np.arange(T)[:, None] - (tau - 1) + np.arange(tau)[None, :])
        obs.append(traj.observations[idx])
        state.append(traj.proprio[idx])
        label.append(np.full(T, traj.task_label))
        actions.append(traj.actions)
    return WindowBatch(np.concatenate(obs), np.concatenate(state), np.concatenate(label).astype(int)), np.concatenate(actions)


class Policy:
    def __init__(self, config: PolicyConfig):
        self.config = config
        self.params = ParamSet()
        rng = rng_for(config.seed, "policy-init")
        c = config
        init_linear(self.params, "enc/obs", c.obs_dim, c.e_o, rng)
        init_linear(self.params, "enc/state", c.state_dim, c.e_s, rng)
        self.params.add("enc/lang/table", rng.uniform(-1, 1, (c.num_tasks, c.e_l)) / math.sqrt(c.num_tasks))
        d, L = c.feature_dim, c.latent_dim
        if c.fusion == "spatial_mlp":
            init_mlp(self.params, "fuse/mlp", [c.flat_dim, c.fusion_hidden, c.fusion_hidden, c.fusion_hidden, L], rng)
        elif c.fusion == "temporal_rnn":
            for gate in ("z", "r", "n"):
                init_linear(self.params, f"fuse/gru/x{gate}", d, L, rng)
                init_linear(self.params, f"fuse/gru/h{gate}", L, L, rng, bias=False)
        else:
            W = c.attn_width
            for name, width in (("o", c.e_o), ("s", c.e_s), ("l", c.e_l)):
                init_linear(self.params, f"fuse/proj_{name}", width, W, rng)
            self.params.add("fuse/pos", rng.uniform(-0.1, 0.1, (c.tau, W)))
            for layer in range(c.attn_layers):
                for name in ("q", "k", "v", "o", "ff1", "ff2"):
                    init_linear(self.params, f"fuse/attn{layer}/{name}", W, W, rng)
            init_linear(self.params, "fuse/out", W, L, rng)
        init_mlp(self.params, "head", [L, c.head_hidden, c.action_dim], rng)

    # -- parameters -------------------------------------------------------

    def frozen_prefixes(self) -> tuple[str, ...]:
        c = self.config
        flags = {"obs": c.train_obs_encoder, "state": c.train_state_encoder, "lang": c.train_lang_encoder}
        return tuple(ENCODER_PREFIXES[k] for k, trainable in flags.items() if not trainable)

    def trainable_params(self) -> ParamSet:
        frozen = self.frozen_prefixes()
        return self.params.subset(lambda p: not p.startswith(frozen)) if frozen else self.params

    # -- forward ------------------------------------------------------------

    def _check(self, batch: WindowBatch) -> None:
        c = self.config
        if batch.obs.ndim != 3 or batch.obs.shape[1] != c.tau or batch.state.shape[1] != c.tau:
            raise ShapeError(f"expected windows of {c.tau} steps, got obs {batch.obs.shape}, state {batch.state.shape}")
        if batch.obs.shape[2] != c.obs_dim or batch.state.shape[2] != c.state_dim:
            raise ShapeError(
                f"expected obs/state widths {c.obs_dim}/{c.state_dim}, got {batch.obs.shape[2]}/{batch.state.shape[2]}"
            )

    def encode(self, batch: WindowBatch) -> TensorNode:
        """Per-step ``concat(Enc_o(o), Enc_s(s), Enc_l(l))`` as ``tau*B x feature_dim`` step-major rows."""
        self._check(batch)
        B, tau = len(batch), self.config.tau
        obs_rows = TensorNode(batch.obs.transpose(1, 0, 2).reshape(tau * B, -1))
        state_rows = TensorNode(batch.state.transpose(1, 0, 2).reshape(tau * B, -1))
        one_hot = np.zeros((B, self.config.num_tasks))
        one_hot[np.arange(B), batch.label] = 1.0
        lang = ops.matmul(TensorNode(np.tile(one_hot, (tau, 1))), self.params["enc/lang/table"])
        obs_feat = ops.tanh(linear(obs_rows, self.params, "enc/obs"))
        state_feat = linear(state_rows, self.params, "enc/state")
        return ops.concat([obs_feat, state_feat, lang], axis=1)

    def flatten(self, x_steps: TensorNode, batch_size: int) -> TensorNode:
        tau = self.config.tau
        if tau == 1:
            return x_steps
        return ops.concat([ops.slice(x_steps, slice(t * batch_size, (t + 1) * batch_size)) for t in range(tau)], axis=1)

    def fuse(self, x_steps: TensorNode, batch_size: int) -> TensorNode:
        c = self.config
        if x_steps.shape != (c.tau * batch_size, c.feature_dim):
            raise ShapeError(f"fuse: expected {(c.tau * batch_size, c.feature_dim)} features, got {x_steps.shape}")
        if c.fusion == "spatial_mlp":
            return mlp(self.flatten(x_steps, batch_size), self.params, "fuse/mlp", 4, "tanh")
        steps = [ops.slice(x_steps, slice(t * batch_size, (t + 1) * batch_size)) for t in range(c.tau)]
        if c.fusion == "temporal_rnn":
            return self._gru(steps)
        return self._attention(steps)

    def _gru(self, steps: list[TensorNode]) -> TensorNode:
        p = self.params
        h = TensorNode(np.zeros((steps[0].shape[0], self.config.latent_dim)))
        for x in steps:
            zg = ops.sigmoid(ops.add(linear(x, p, "fuse/gru/xz"), linear(h, p, "fuse/gru/hz")))
            rg = ops.sigmoid(ops.add(linear(x, p, "fuse/gru/xr"), linear(h, p, "fuse/gru/hr")))
            n = ops.tanh(ops.add(linear(x, p, "fuse/gru/xn"), ops.mul(rg, linear(h, p, "fuse/gru/hn"))))
            h = ops.add(ops.mul(ops.sub(1.0, zg), n), ops.mul(zg, h))
        return h

    def _attention(self, steps: list[TensorNode]) -> TensorNode:
        c, p = self.config, self.params
        eo, es = c.e_o, c.e_o + c.e_s
        pos = p["fuse/pos"]
        tokens = []
        for t, x in enumerate(steps):
            tok = ops.add(
                ops.add(linear(ops.slice(x, cols=slice(0, eo)), p, "fuse/proj_o"), linear(ops.slice(x, cols=slice(eo, es)), p, "fuse/proj_s")),
                linear(ops.slice(x, cols=slice(es, None)), p, "fuse/proj_l"),
            )
            tokens.append(ops.add(tok, ops.slice(pos, slice(t, t + 1))))
        dh = c.attn_width // c.attn_heads
        scale = 1.0 / math.sqrt(dh)
        for layer in range(c.attn_layers):
            pre = f"fuse/attn{layer}"
            q = [linear(tok, p, f"{pre}/q") for tok in tokens]
            k = [linear(tok, p, f"{pre}/k") for tok in tokens]
            v = [linear(tok, p, f"{pre}/v") for tok in tokens]
            new_tokens = []
            for i in range(len(tokens)):
                heads = []
                for hd in range(c.attn_heads):
                    cols = slice(hd * dh, (hd + 1) * dh)
                    qi = ops.slice(q[i], cols=cols)
                    scores = ops.concat(
                        [ops.sum(ops.mul(qi, ops.slice(kj, cols=cols)), axis=1) for kj in k], axis=1
                    )
                    w = ops.softmax(ops.mul(scores, scale))
                    mixed = ops.mul(ops.slice(w, cols=slice(0, 1)), ops.slice(v[0], cols=cols))
                    for j in range(1, len(v)):
                        mixed = ops.add(mixed, ops.mul(ops.slice(w, cols=slice(j, j + 1)), ops.slice(v[j], cols=cols)))
                    heads.append(mixed)
                attn = linear(ops.concat(heads, axis=1) if len(heads) > 1 else heads[0], p, f"{pre}/o")
                tok = ops.add(tokens[i], attn)
                tok = ops.add(tok, linear(ops.tanh(linear(tok, p, f"{pre}/ff1")), p, f"{pre}/ff2"))
                new_tokens.append(tok)
            tokens = new_tokens
        return linear(tokens[-1], p, "fuse/out")

    def forward(self, batch: WindowBatch) -> PolicyOutput:
        x_steps = self.encode(batch)
        z = self.fuse(x_steps, len(batch))
        action = mlp(z, self.params, "head", 2, "tanh")
        return PolicyOutput(self.flatten(x_steps, len(batch)), z, action)

    def act_batch(self, batch: WindowBatch) -> np.ndarray:
        with no_grad():
            return self.forward(batch).action.value

    def act(self, window: WindowBatch) -> np.ndarray:
        return self.act_batch(window)[0]

    def features(self, batch: WindowBatch, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """(flattened x, z) rows for every window, without building a graph."""
        xs, zs = [], []
        with no_grad():
            for start in range(0, len(batch), chunk):
                out = self.forward(batch.take(slice(start, start + chunk)))
                xs.append(out.x.value)
                zs.append(out.z.value)
        return np.concatenate(xs), np.concatenate(zs)


def encode_concat(policy: Policy, window: WindowBatch) -> np.ndarray:
    """``tau x feature_dim`` features of a single window (rows are time steps)."""
    if len(window) != 1:
        raise ShapeError(f"encode_concat takes one window, got {len(window)}")
    with no_grad():
        return policy.encode(window).value


def fuse(policy: Policy, x: np.ndarray) -> np.ndarray:
    """Latent vector for one window's ``tau x feature_dim`` features."""
    with no_grad():
        return policy.fuse(TensorNode(x), 1).value[0]


def act(policy: Policy, window: WindowBatch) -> np.ndarray:
    return policy.act(window)


# ---------------------------------------------------------------------------
# checkpoints: ParamSet binary + PolicyConfig JSON trailer


def policy_to_bytes(policy: Policy) -> bytes:
    return params_to_bytes(policy.params.snapshot(), json.dumps(asdict(policy.config), sort_keys=True).encode("utf-8"))


def save_policy(path: str | Path, policy: Policy) -> None:
    Path(path).write_bytes(policy_to_bytes(policy))


def load_policy(path: str | Path) -> Policy:
    values, trailer = load_params(path)
    known = {f.name for f in fields(PolicyConfig)}
    cfg = {k: v for k, v in json.loads(trailer.decode("utf-8")).items() if k in known}
    policy = Policy(PolicyConfig(**cfg))
    policy.params.load_snapshot(values)
    return policy
