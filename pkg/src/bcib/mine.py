"""MINE: neural estimation of I(X; Z) through the Donsker-Varadhan bound.

The statistics network scores ``concat(x, z)`` rows. Joint samples are the
batch as given; product-of-marginals samples pair each ``x`` with a ``z``
row drawn by a seeded permutation of the batch. Two uses:

* :func:`critic_step` ascends the bound in the critic parameters, with the
  marginal-term gradient normalised by a moving average of ``E[e^T]``.
* :func:`mi_penalty` evaluates the bound as a graph node whose gradient flows
  into ``x`` and ``z`` only; the critic is read as constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, TensorNode, adam, load_params, no_grad, ops, optimizer_step, save_params
from .autodiff.tensor import _result
from .nn import init_mlp, mlp
from .seeding import rng_for


@dataclass(frozen=True)
class MineConfig:
    layers: int = 4
    hidden: int = 64
    lr: float = 1e-5
    ema_decay: float = 0.99
    score_clip: float = 50.0
    critic_steps_per_policy_step: int = 1
    ema_correction: bool = True
    # Optional scale on the critic objective; 1.0 leaves it untouched.
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("MineConfig.layers must be >= 2")
        if self.hidden < 1:
            raise ValueError("MineConfig.hidden must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("MineConfig.ema_decay must lie in (0, 1)")
        if self.score_clip <= 0:
            raise ValueError("MineConfig.score_clip must be positive")
        if self.lr < 0:
            raise ValueError("MineConfig.lr must be non-negative")
        if self.critic_steps_per_policy_step < 0:
            raise ValueError("MineConfig.critic_steps_per_policy_step must be >= 0")


@dataclass(frozen=True)
class MiEstimate:
    value: float
    joint_mean: float
    log_marginal_mean: float
    batch_size: int


def marginal_permutation(n: int, seed: int) -> np.ndarray:
    if n < 2:
        raise ValueError(f"marginal shuffle needs at least 2 samples, got {n}")
    return np.random.default_rng(seed).permutation(n)


def shuffle_marginals(x_batch: np.ndarray, z_batch: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair each x row with a uniformly permuted z row (samples of P_X x P_Z)."""
    x_batch, z_batch = np.asarray(x_batch), np.asarray(z_batch)
    if len(x_batch) != len(z_batch):
        raise ValueError(f"row counts differ: {len(x_batch)} vs {len(z_batch)}")
    return x_batch, z_batch[marginal_permutation(len(z_batch), seed)]


def _dv_terms(joint: np.ndarray, marginal: np.ndarray) -> tuple[float, float, np.ndarray]:
    # Shift by the max before averaging so a constant critic gives exactly 0.
    mj = joint.max()
    joint_mean = mj + np.mean(joint - mj)
    mm = marginal.max()
    e = np.exp(marginal - mm)
    total = e.mean()
    return float(joint_mean), float(mm + np.log(total)), e / (total * e.size)


def dv_bound(joint_scores, marginal_scores) -> MiEstimate:
    """``mean(T_joint) - log(mean(exp(T_marginal)))`` in nats."""
    joint = np.asarray(joint_scores, dtype=np.float64).reshape(-1)
    marginal = np.asarray(marginal_scores, dtype=np.float64).reshape(-1)
    if joint.size < 1 or joint.size != marginal.size:
        raise ValueError(f"need equal, non-empty score vectors; got {joint.size} and {marginal.size}")
    if not (np.all(np.isfinite(joint)) and np.all(np.isfinite(marginal))):
        raise ValueError("dv_bound: non-finite score")
    jm, lmm, _ = _dv_terms(joint, marginal)
    return MiEstimate(jm - lmm, jm, lmm, joint.size)


def dv_node(joint: TensorNode, marginal: TensorNode) -> TensorNode:
    """:func:`dv_bound` as a differentiable scalar node over two ``n x 1`` score columns."""
    est = dv_bound(joint.value, marginal.value)
    _, _, weights = _dv_terms(joint.value.reshape(-1), marginal.value.reshape(-1))
    n = joint.value.size
    w_marg = weights.reshape(marginal.shape)

    def rule(g):
        return np.full(joint.shape, g[0, 0] / n), -g[0, 0] * w_marg

    return _result(np.array([[est.value]]), "dv_bound", (joint, marginal), rule)


class MineEstimator:
    """Statistics network T(x, z) -> R, its Adam state, and the EMA of E[e^T]."""

    def __init__(self, x_dim: int, z_dim: int, config: MineConfig | None = None, seed: int = 0):
        self.config = config or MineConfig()
        self.x_dim, self.z_dim = int(x_dim), int(z_dim)
        self.seed = seed
        self.params = ParamSet()
        widths = [self.x_dim + self.z_dim] + [self.config.hidden] * (self.config.layers - 1) + [1]
        init_mlp(self.params, "mine", widths, rng_for(seed, "mine-init"))
        self.opt = adam(lr=self.config.lr)
        self.ema_denominator: float | None = None

    def _check(self, x: TensorNode, z: TensorNode) -> None:
        if x.shape[1] + z.shape[1] != self.x_dim + self.z_dim or x.shape[1] != self.x_dim:
            raise ValueError(
                f"statistics network expects x width {self.x_dim} and z width {self.z_dim}, "
                f"got {x.shape[1]} and {z.shape[1]}"
            )
        if x.shape[0] != z.shape[0]:
            raise ValueError(f"row counts differ: {x.shape[0]} vs {z.shape[0]}")

    def paired_scores(self, x, z, seed: int, frozen: bool = False) -> tuple[TensorNode, TensorNode]:
        """Clipped scores on the joint batch and on its seeded marginal shuffle."""
        x, z = ops.as_node(x), ops.as_node(z)
        self._check(x, z)
        n = x.shape[0]
        perm = marginal_permutation(n, seed)
        rows = ops.concat(
            [ops.concat([x, z], axis=1), ops.concat([x, ops.take_rows(z, perm)], axis=1)], axis=0
        )
        clip = self.config.score_clip
        scores = ops.clip(mlp(rows, self.params, "mine", self.config.layers, "relu", frozen), -clip, clip)
        return ops.slice(scores, slice(0, n)), ops.slice(scores, slice(n, 2 * n))

    def estimate(self, x, z, seed: int) -> MiEstimate:
        with no_grad():
            joint, marginal = self.paired_scores(x, z, seed, frozen=True)
        return dv_bound(joint.value, marginal.value)

    def save(self, path: str | Path) -> None:
        meta = {"x_dim": self.x_dim, "z_dim": self.z_dim, "config": asdict(self.config), "ema": self.ema_denominator}
        save_params(path, self.params, json.dumps(meta, sort_keys=True).encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> MineEstimator:
        values, trailer = load_params(path)
        meta = json.loads(trailer.decode("utf-8"))
        est = cls(meta["x_dim"], meta["z_dim"], MineConfig(**meta["config"]))
        est.params.load_snapshot(values)
        est.ema_denominator = meta["ema"]
        return est


def critic_step(est: MineEstimator, x_batch, z_batch, seed: int) -> float:
    """One ascent step of the critic on the DV bound; returns the pre-step estimate.

    The batches are treated as constants. With EMA correction the marginal
    term's gradient uses ``grad E[e^T] / ema`` in place of ``grad log E[e^T]``.
    """
    x = TensorNode(np.asarray(x_batch.value if isinstance(x_batch, TensorNode) else x_batch))
    z = TensorNode(np.asarray(z_batch.value if isinstance(z_batch, TensorNode) else z_batch))
    cfg = est.config
    est.params.zero_grad()
    joint, marginal = est.paired_scores(x, z, seed)
    before = dv_bound(joint.value, marginal.value).value
    if cfg.ema_correction:
        exp_marg = ops.exp(marginal)
        batch_denominator = float(np.mean(exp_marg.value))
        if est.ema_denominator is None:
            est.ema_denominator = batch_denominator
        else:
            est.ema_denominator = cfg.ema_decay * est.ema_denominator + (1.0 - cfg.ema_decay) * batch_denominator
        objective = ops.sub(ops.mean(joint), ops.mul(ops.mean(exp_marg), 1.0 / est.ema_denominator))
    else:
        objective = dv_node(joint, marginal)
    loss = ops.mul(objective, -cfg.loss_weight)
    loss.backward()
    optimizer_step(est.opt, est.params)
    est.params.zero_grad()
    return before


def mi_penalty(est: MineEstimator, x_batch: TensorNode, z_batch: TensorNode, seed: int) -> TensorNode:
    """DV estimate as a graph node; gradients reach x and z, never the critic."""
    joint, marginal = est.paired_scores(x_batch, z_batch, seed, frozen=True)
    return dv_node(joint, marginal)


def gaussian_mi_oracle(rho: float, dims: int = 1) -> float:
    """Closed-form I(X; Z) in nats for ``dims`` independent pairs with correlation ``rho``."""
    if not abs(rho) < 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if dims < 1:
        raise ValueError("dims must be >= 1")
    return dims * (-0.5 * math.log(1.0 - rho * rho))


def sample_gaussian_pairs(rng: np.random.Generator, n: int, rho: float, dims: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal((n, dims))
    z = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dims))
    return x, z


def estimate_gaussian_mi(
    rho: float,
    dims: int = 1,
    steps: int = 5000,
    batch_size: int = 512,
    config: MineConfig | None = None,
    seed: int = 0,
    average_last: int = 500,
) -> float:
    """Train a fresh estimator on fresh correlated-Gaussian batches.

    Returns the running estimate: the mean pre-step DV value over the last
    ``average_last`` steps.
    """
    gaussian_mi_oracle(rho, dims)
    config = config or MineConfig(lr=1e-3)
    est = MineEstimator(dims, dims, config, seed)
    data_rng = rng_for(seed, "gaussian-batches")
    history = []
    for step in range(steps):
        x, z = sample_gaussian_pairs(data_rng, batch_size, rho, dims)
        history.append(critic_step(est, x, z, seed=step))
    return float(np.mean(history[-average_last:]))
