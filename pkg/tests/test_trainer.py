import math
from dataclasses import replace

import numpy as np
import pytest

import bcib.trainer as trainer
from bcib.autodiff import TensorNode
from bcib.config import RunConfig
from bcib.data import generate_dataset
from bcib.envs import EnvSpec
from bcib.mine import MineConfig, MineEstimator
from bcib.policy import Policy, PolicyConfig, WindowBatch, build_samples, policy_to_bytes
from bcib.rollouts import EvalSettings, evaluate
from bcib.trainer import (
    REPORT_HEADER,
    Batch,
    NumericalAbort,
    TrainConfig,
    TrainReport,
    bc_loss,
    bcib_loss,
    fit,
    make_optimizer,
    train_step,
)

SPEC = EnvSpec(noise_dims=4, num_tasks=2)


def small_policy(seed=0, **kw):
    cfg = PolicyConfig.for_env(SPEC, e_o=6, e_s=4, e_l=3, tau=2, latent_dim=8, fusion_hidden=16, head_hidden=16, seed=seed, **kw)
    return Policy(cfg)


def small_mine(policy, seed=0, lr=1e-3):
    c = policy.config
    return MineEstimator(c.flat_dim, c.latent_dim, MineConfig(hidden=16, lr=lr), seed=seed)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(SPEC, 4, seed=0)


def sample_batch(dataset, tau=2, n=16, seed=0):
    windows, actions = build_samples(dataset, tau)
    idx = np.random.default_rng(seed).choice(len(windows), size=n, replace=False)
    return Batch(windows.take(idx), actions[idx])


def constant_policy(bias):
    pol = small_policy()
    for node in pol.params.values():
        node.value = np.zeros_like(node.value)
    pol.params["head/l1/b"].value = np.array([bias], dtype=float)
    return pol


def one_window_batch(pol, target):
    c = pol.config
    w = WindowBatch(np.zeros((1, c.tau, c.obs_dim)), np.zeros((1, c.tau, c.state_dim)), np.array([0]))
    return Batch(w, np.array([target], dtype=float))


def fixed_clock():
    t = iter(range(10**6))
    return lambda: float(next(t))


# -- losses ---------------------------------------------------------------


def test_bc_loss_examples():
    pol = constant_policy([1.0, 0.0])
    assert bc_loss(pol, one_window_batch(pol, [1.0, 0.0])).item() == 0.0
    assert bc_loss(pol, one_window_batch(pol, [0.0, 0.0])).item() == 0.5


def test_bc_loss_matches_scalar_loop(dataset):
    pol = small_policy()
    batch = sample_batch(dataset)
    pred = pol.act_batch(batch.windows)
    total = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += (pred[i, j] - batch.actions[i, j]) ** 2
    assert abs(bc_loss(pol, batch).item() - total / pred.size) <= 1e-12


def test_bc_loss_rejects_empty_batch(dataset):
    pol = small_policy()
    batch = sample_batch(dataset)
    with pytest.raises(ValueError):
        bc_loss(pol, Batch(batch.windows.take(slice(0, 0)), batch.actions[:0]))


def test_bcib_linear_combination(monkeypatch, dataset):
    pol = constant_policy([0.5, 0.5])
    monkeypatch.setattr(trainer, "mi_penalty", lambda *a, **k: TensorNode(0.5))
    batch = sample_batch(dataset)
    batch = Batch(batch.windows, np.zeros_like(batch.actions))
    total, parts = bcib_loss(pol, small_mine(pol), batch, beta=1.0, seed=0)
    assert (parts.bc, parts.mi, total.item()) == (0.25, 0.5, 0.75)


def test_bcib_beta_zero_equals_bc_with_identical_gradients(dataset):
    batch = sample_batch(dataset)
    a, b = small_policy(), small_policy()
    total, parts = bcib_loss(a, small_mine(a), batch, beta=0.0, seed=3)
    ref = bc_loss(b, batch)
    assert total.item() == ref.item() == parts.total
    assert math.isfinite(parts.mi)
    total.backward()
    ref.backward()
    for p in a.params:
        assert np.array_equal(a.params[p].grad, b.params[p].grad), p


def test_bcib_recombination_to_1e_12(dataset):
    pol = small_policy()
    total, parts = bcib_loss(pol, small_mine(pol), sample_batch(dataset), beta=1e-3, seed=5)
    assert abs(total.item() - (parts.bc + 1e-3 * parts.mi)) <= 1e-12
    assert total.item() == parts.total


def test_bcib_needs_two_windows(dataset):
    pol = small_policy()
    batch = sample_batch(dataset, n=1)
    with pytest.raises(ValueError):
        bcib_loss(pol, small_mine(pol), batch, 1e-3, seed=0)


# -- steps ----------------------------------------------------------------


def run_steps(dataset, beta, steps, with_mine=True):
    cfg = TrainConfig(beta=beta, seed=0)
    pol = small_policy()
    mine = small_mine(pol) if with_mine else None
    opt = make_optimizer(cfg)
    trajectory = []
    for s in range(steps):
        train_step(pol, mine, opt, sample_batch(dataset, seed=s), cfg, s)
        trajectory.append(policy_to_bytes(pol))
    return trajectory, mine


def test_beta_zero_policy_trajectory_matches_vanilla_while_critic_trains(dataset):
    ib, mine = run_steps(dataset, 0.0, 50)
    vanilla, _ = run_steps(dataset, 0.0, 50, with_mine=False)
    assert ib == vanilla
    fresh = small_mine(small_policy())
    assert any(not np.array_equal(mine.params[p].value, fresh.params[p].value) for p in fresh.params)


def test_positive_beta_changes_the_trajectory(dataset):
    ib, _ = run_steps(dataset, 1.0, 5)
    vanilla, _ = run_steps(dataset, 0.0, 5, with_mine=False)
    assert ib[-1] != vanilla[-1]


def test_step_record_fields(dataset):
    cfg = TrainConfig(beta=1e-3)
    pol = small_policy()
    rec = train_step(pol, small_mine(pol), make_optimizer(cfg), sample_batch(dataset), cfg, step=7, lr=2e-4)
    assert rec.step == 7 and rec.lr == 2e-4
    assert rec.grad_norm > 0
    assert abs(rec.total_loss - (rec.bc_loss + 1e-3 * rec.mi_estimate)) <= 1e-12


def test_non_finite_loss_aborts_with_step_index(dataset):
    cfg = TrainConfig(beta=1e-3)
    pol = small_policy()
    pol.params["head/l1/b"].value = np.full_like(pol.params["head/l1/b"].value, np.nan)
    with pytest.raises(NumericalAbort) as info:
        train_step(pol, small_mine(pol), make_optimizer(cfg), sample_batch(dataset), cfg, step=12)
    assert info.value.step == 12 and info.value.last_good_step == 11
    assert "last good step 11" in str(info.value)


# -- fit --------------------------------------------------------------------


def test_fit_one_epoch_with_eval(dataset):
    pol = small_policy()
    cfg = TrainConfig(epochs=1, eval_every=1, batch_size=32)
    report = fit(pol, small_mine(pol), dataset, cfg, EvalSettings(SPEC, episodes=4))
    assert len(report.records) == 1
    assert report.records[0].eval_success_rate is not None
    assert report.selected_epoch == 1


def test_final_epoch_selection_and_eval_schedule(dataset):
    pol = small_policy()
    cfg = TrainConfig(epochs=4, eval_every=3, batch_size=32, model_selection="final_epoch")
    report = fit(pol, small_mine(pol), dataset, cfg, EvalSettings(SPEC, episodes=4))
    assert report.selected_epoch == cfg.epochs
    assert [r.eval_success_rate is not None for r in report.records] == [False, False, True, True]
    lines = report.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert lines[1].split(",")[4] == ""
    back = TrainReport.records_from_csv(report.to_csv())
    assert back == report.records


def test_best_eval_restores_the_selected_epoch(dataset):
    pol = small_policy()
    cfg = TrainConfig(epochs=4, eval_every=1, batch_size=32, model_selection="best_eval")
    settings = EvalSettings(SPEC, episodes=6)
    report = fit(pol, small_mine(pol), dataset, cfg, settings)
    rates = {r.epoch: r.eval_success_rate for r in report.records}
    best = max(rates.values())
    assert report.selected_epoch == max(e for e, v in rates.items() if v == best)
    assert evaluate(pol, SPEC, settings.episodes, settings.seed_bank).success_rate == best


def test_best_eval_needs_an_environment(dataset):
    pol = small_policy()
    with pytest.raises(ValueError):
        fit(pol, None, dataset, TrainConfig(model_selection="best_eval"))


def test_reports_are_deterministic_and_decompose(dataset):
    def run():
        pol = small_policy(seed=1)
        cfg = TrainConfig(beta=1e-2, epochs=3, batch_size=16, seed=1, eval_every=2)
        report = fit(pol, small_mine(pol, seed=1), dataset, cfg, EvalSettings(SPEC, episodes=4), clock=fixed_clock())
        return report, policy_to_bytes(pol)

    (r1, p1), (r2, p2) = run(), run()
    assert r1.to_csv() == r2.to_csv()
    assert r1.steps == r2.steps
    assert p1 == p2
    for rec in r1.steps + r1.records:
        assert abs(rec.total_loss - (rec.bc_loss + 1e-2 * rec.mi_estimate)) <= 1e-9
    assert all(r.seconds == 1.0 for r in r1.records)


def test_cosine_schedule_ends_near_zero(dataset):
    pol = small_policy()
    cfg = TrainConfig(epochs=5, batch_size=16)
    report = fit(pol, None, dataset, cfg)
    assert report.steps[0].lr == cfg.policy_lr
    assert report.steps[-1].lr < 1e-2 * cfg.policy_lr


def test_abort_persists_partial_report(dataset, tmp_path):
    pol = small_policy()
    cfg = TrainConfig(epochs=3, batch_size=16)

    def poison(record):
        pol.params["head/l1/b"].value = np.full_like(pol.params["head/l1/b"].value, np.inf)

    path = tmp_path / "report.csv"
    with pytest.raises(NumericalAbort) as info:
        fit(pol, small_mine(pol), dataset, cfg, report_path=path, on_epoch=poison)
    per_epoch = len(info.value.report.steps)
    assert info.value.step == per_epoch and info.value.last_good_step == per_epoch - 1
    assert len(TrainReport.records_from_csv(path.read_text())) == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(model_selection="best")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_bc_loss_mostly_decreases_on_default_task():
    cfg = RunConfig()
    data = generate_dataset(cfg.env, cfg.data.num_demos, seed=0)
    pcfg = cfg.policy_config()
    pol = Policy(pcfg)
    mine = MineEstimator(pcfg.flat_dim, pcfg.latent_dim, cfg.mine, seed=0)
    report = fit(pol, mine, data, replace(cfg.train_config(), epochs=11))
    losses = [r.bc_loss for r in report.records]
    non_increasing = sum(b <= a for a, b in zip(losses[:-1], losses[1:]))
    assert non_increasing >= 8, losses


def test_training_mi_falls_with_beta_in_every_seed_pair():
    base = RunConfig()
    for seed in range(3):
        data = generate_dataset(base.env, base.data.num_demos, seed=seed)
        final = {}
        for beta in (0.0, 1e-3):
            cfg = base.with_seed(seed)
            pcfg = cfg.policy_config()
            pol = Policy(pcfg)
            mine = MineEstimator(pcfg.flat_dim, pcfg.latent_dim, cfg.mine, seed=seed)
            report = fit(pol, mine, data, replace(cfg.train_config(), beta=beta))
            final[beta] = report.records[-1].mi_estimate
        assert final[1e-3] < final[0.0], (seed, final)
