"""Command-line interface: ``bcib <command> [options]``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical abort.
Every command that trains or evaluates echoes its effective configuration
(TOML, all defaults resolved) before doing any work.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .artifacts import emit_artifacts, emit_mi_curve
from .autodiff import CheckpointError, inject_fault
from .autodiff.opcheck import OP_CASES
from .config import ConfigError, RunConfig, load_config
from .data import ExpertFailureError, generate_dataset, load_dataset, save_dataset
from .harness import few_shot_pool, sweep_beta, sweep_few_shot, track_mi
from .mine import MineConfig, MineEstimator, estimate_gaussian_mi, gaussian_mi_oracle
from .policy import Policy, load_policy, save_policy
from .rollouts import EvalSettings, ExpertController, evaluate
from .seeding import derive_seed
from .selfcheck import run_selfcheck
from .trainer import NumericalAbort, fit

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _out(msg: str = "") -> None:
    print(msg, flush=True)


def _echo_config(cfg: RunConfig) -> None:
    _out("# effective config")
    _out(cfg.to_toml().rstrip())
    _out("# end effective config")


def _overrides(args: argparse.Namespace, mapping: dict[str, tuple[str, str]]) -> dict:
    """Collect set CLI flags into a nested override mapping."""
    out: dict = {}
    for attr, (section, key) in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if section == "":
            out[key] = value
        else:
            out.setdefault(section, {})[key] = value
    return out


COMMON_FLAGS = {
    "seed": ("", "seed"),
    "out_dir": ("", "out_dir"),
}
ENV_FLAGS = {
    "env": ("env", "kind"),
    "noise_dims": ("env", "noise_dims"),
    "noise_kind": ("env", "noise_kind"),
    "num_tasks": ("env", "num_tasks"),
    "max_steps": ("env", "max_steps"),
}
TRAIN_FLAGS = {
    "beta": ("train", "beta"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "policy_lr": ("train", "policy_lr"),
    "model_selection": ("train", "model_selection"),
    "eval_every": ("train", "eval_every"),
    "fusion": ("policy", "fusion"),
    "tau": ("policy", "tau"),
    "critic_lr": ("mine", "lr"),
    "critic_steps": ("mine", "critic_steps_per_policy_step"),
    "episodes": ("eval", "episodes"),
    "seed_bank": ("eval", "seed_bank"),
}


def _config(args: argparse.Namespace, *flag_maps: dict) -> RunConfig:
    merged: dict = {}
    for fm in (COMMON_FLAGS,) + flag_maps:
        for k, v in _overrides(args, fm).items():
            if isinstance(v, dict):
                merged.setdefault(k, {}).update(v)
            else:
                merged[k] = v
    return load_config(getattr(args, "config", None), merged)


def _parse_floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse value list {text!r}") from exc
    if not vals:
        raise UsageError("empty value list")
    return vals


def _parse_seeds(text: str) -> list[int]:
    """``3`` means seeds 0, 1, 2; ``4,7`` lists seeds explicitly."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        n = int(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse seeds {text!r}") from exc
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(n))


def _load_data(path: str):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    try:
        return load_dataset(p)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read dataset {p}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.demos is not None and args.demos < 1:
        raise UsageError("--demos must be >= 1")
    cfg = _config(args, ENV_FLAGS, {"demos": ("data", "num_demos")})
    _echo_config(cfg)
    try:
        ds = generate_dataset(cfg.env, cfg.data.num_demos, cfg.seed)
    except ExpertFailureError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out) if args.out else Path(cfg.out_dir) / "demos.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    lengths = [len(t) for t in ds.trajectories]
    successes = sum(t.success for t in ds.trajectories)
    _out(
        f"wrote {len(ds)} demos to {out}: {successes}/{len(ds)} successful, "
        f"{ds.num_samples} steps, mean length {np.mean(lengths):.1f}, regenerated {ds.meta.get('regenerated', 0)}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    dataset = _load_data(args.data)
    cfg = _config(args, TRAIN_FLAGS)
    cfg = replace(cfg, env=dataset.env_spec)
    _echo_config(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    pcfg = cfg.policy_config()
    policy = Policy(pcfg)
    mine = None if args.vanilla else MineEstimator(pcfg.flat_dim, pcfg.latent_dim, cfg.mine, seed=derive_seed(cfg.seed, "critic"))
    eval_settings = EvalSettings(cfg.env, cfg.eval.episodes, cfg.eval.seed_bank)
    clock = (lambda: 0.0) if args.no_timing else None
    kwargs = {"clock": clock} if clock else {}
    try:
        report = fit(policy, mine, dataset, cfg.train_config(), eval_settings, report_path=out / "train_report.csv", **kwargs)
    except NumericalAbort as exc:
        _out(f"numerical abort: {exc}")
        _out(f"partial report written to {out / 'train_report.csv'}")
        return EXIT_NUMERIC
    save_policy(out / "policy.bin", policy)
    if mine is not None:
        mine.save(out / "mine.bin")
    emit_mi_curve(report, out)
    last = report.records[-1]
    sr = next((r.eval_success_rate for r in reversed(report.records) if r.epoch == report.selected_epoch), None)
    if sr is None:
        sr = evaluate(policy, cfg.env, cfg.eval.episodes, cfg.eval.seed_bank).success_rate
    _out(
        f"final bc_loss {last.bc_loss:.6g}, final mi {last.mi_estimate:.6g}, "
        f"selected epoch {report.selected_epoch}, eval sr {sr:.4g}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args, ENV_FLAGS, {"episodes": ("eval", "episodes"), "seed_bank": ("eval", "seed_bank")})
    _echo_config(cfg)
    if args.expert:
        controller = ExpertController()
        label = "expert"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --expert")
        try:
            controller = load_policy(args.checkpoint)
        except FileNotFoundError as exc:
            raise UsageError(f"checkpoint not found: {args.checkpoint}") from exc
        except (CheckpointError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
        label = str(args.checkpoint)
    try:
        res = evaluate(controller, cfg.env, cfg.eval.episodes, cfg.eval.seed_bank)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    per_task = " ".join(f"task{k}={v:.4g}" for k, v in res.per_task.items())
    _out(
        f"{label}: success_rate {res.success_rate:.4g} ({res.successes}/{res.episodes}), "
        f"mean episode length {res.mean_episode_length:.4g}, seed bank {res.seed_bank}, {per_task}"
    )
    if args.csv:
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        rows = ["episodes,successes,success_rate,mean_episode_length,seed_bank"]
        rows.append(f"{res.episodes},{res.successes},{res.success_rate!r},{res.mean_episode_length!r},{res.seed_bank}")
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_estimate_mi(args: argparse.Namespace) -> int:
    if args.gaussian is not None:
        rho, dims = args.gaussian
        try:
            rho, dims = float(rho), int(dims)
        except ValueError as exc:
            raise UsageError("--gaussian takes RHO DIMS") from exc
        if not abs(rho) < 1:
            raise UsageError(f"|rho| must be < 1, got {rho}")
        if dims < 1:
            raise UsageError("dims must be >= 1")
        config = MineConfig(lr=args.lr)
        est = estimate_gaussian_mi(rho, dims, steps=args.steps, batch_size=args.batch_size, config=config, seed=args.seed or 0)
        oracle = gaussian_mi_oracle(rho, dims)
        _out(f"estimate {est:.6f} nats, oracle {oracle:.6f} nats, gap {abs(est - oracle):.6f}")
        return EXIT_OK
    if not (args.checkpoint and args.data):
        raise UsageError("estimate-mi needs --gaussian RHO DIMS or --checkpoint and --data")
    cfg = _config(args)
    _echo_config(cfg)
    try:
        policy = load_policy(args.checkpoint)
    except (FileNotFoundError, CheckpointError, ValueError) as exc:
        raise UsageError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    dataset = _load_data(args.data)
    if dataset.env_spec.obs_dim != policy.config.obs_dim:
        raise UsageError("dataset and checkpoint dimensions differ")
    value = track_mi(policy, dataset, cfg.probe, seed=cfg.seed)
    _out(f"probe estimate {value:.6f} nats")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args, TRAIN_FLAGS)
    seeds = _parse_seeds(args.seeds)
    values = _parse_floats(args.values)
    if args.axis == "demos" and any(v < 1 or v != int(v) for v in values):
        raise UsageError("--values for the demos axis must be positive integers")
    if args.data:
        dataset = _load_data(args.data)
        cfg = replace(cfg, env=dataset.env_spec)
    else:
        dataset = None
    _echo_config(cfg)
    out = Path(cfg.out_dir)
    resume = Path(args.resume) if args.resume else out / f"sweep_{args.axis}.resume.jsonl"
    log = _out
    if args.axis == "beta":
        dataset = dataset or generate_dataset(cfg.env, cfg.data.num_demos, cfg.seed)
        result = sweep_beta(cfg, values, seeds, dataset, jobs=args.jobs, resume=resume, log=log)
    else:
        counts = [int(v) for v in values]
        pool = dataset or few_shot_pool(cfg, max(counts))
        result = sweep_few_shot(cfg, counts, seeds, pool, jobs=args.jobs, resume=resume, log=log)
    files = emit_artifacts([result], out)
    for p in result.points:
        sd = "" if p.sd_success is None else f" ± {p.sd_success:.3f}"
        _out(f"{args.axis}={p.value:g}: success {p.mean_success:.3f}{sd}, final MI {p.mean_final_mi:.4f} over {len(p.seeds)} seed(s)")
    _out("wrote " + ", ".join(str(f) for f in files))
    ok = [r for r in result.runs if r.ok]
    if ok:
        return EXIT_OK
    if all(r.error.startswith("numerical abort") for r in result.runs):
        return EXIT_NUMERIC
    return EXIT_FAIL


def cmd_selfcheck(args: argparse.Namespace) -> int:
    if args.inject_fault and args.inject_fault not in OP_CASES:
        raise UsageError(f"unknown op {args.inject_fault!r}; choose from {', '.join(OP_CASES)}")
    if args.inject_fault:
        with inject_fault(args.inject_fault):
            results = run_selfcheck(fast=args.fast, log=_out)
    else:
        results = run_selfcheck(fast=args.fast, log=_out)
    failed = [r.name for r in results if not r.passed]
    _out(f"selfcheck: {len(results) - len(failed)}/{len(results)} passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_OK if not failed else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcib", description="Information-bottleneck regularised behaviour cloning at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (all sub-seeds derive from it)")
        sp.add_argument("--out-dir", help="output directory (default: $BCIB_OUT or ./bcib-out)")

    def env_flags(sp):
        sp.add_argument("--env", choices=["reach", "pick_place"])
        sp.add_argument("--noise-dims", type=int)
        sp.add_argument("--noise-kind", choices=["iid_gaussian", "slow_drift", "copy_of_state_with_noise"])
        sp.add_argument("--num-tasks", type=int)
        sp.add_argument("--max-steps", type=int)

    def train_flags(sp):
        sp.add_argument("--beta", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--policy-lr", type=float)
        sp.add_argument("--model-selection", choices=["best_eval", "final_epoch"])
        sp.add_argument("--eval-every", type=int)
        sp.add_argument("--fusion", choices=["spatial_mlp", "temporal_rnn", "temporal_attn"])
        sp.add_argument("--tau", type=int)
        sp.add_argument("--critic-lr", type=float)
        sp.add_argument("--critic-steps", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--seed-bank", type=int)

    g = sub.add_parser("gen-data", help="generate expert demonstrations (JSON Lines)")
    common(g)
    env_flags(g)
    g.add_argument("--demos", type=int, help="number of demonstrations")
    g.add_argument("--out", help="dataset path (default: <out-dir>/demos.jsonl)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a policy (BC-IB, or vanilla BC with --vanilla)")
    common(t)
    train_flags(t)
    t.add_argument("--data", required=True, help="dataset from gen-data")
    t.add_argument("--vanilla", action="store_true", help="plain BC without a critic")
    t.add_argument("--no-timing", action="store_true", help="record 0 seconds per epoch so reports are byte-reproducible")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint or the scripted expert")
    common(e)
    env_flags(e)
    e.add_argument("--checkpoint", help="policy checkpoint from train")
    e.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    e.add_argument("--episodes", type=_positive_int)
    e.add_argument("--seed-bank", type=int)
    e.add_argument("--csv", help="also write the result as CSV")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("estimate-mi", help="MINE estimate on Gaussian pairs or on a policy's features")
    common(m)
    m.add_argument("--gaussian", nargs=2, metavar=("RHO", "DIMS"), help="oracle validation mode")
    m.add_argument("--steps", type=int, default=3000)
    m.add_argument("--batch-size", type=int, default=512)
    m.add_argument("--lr", type=float, default=1e-3, help="critic learning rate (Gaussian mode)")
    m.add_argument("--checkpoint")
    m.add_argument("--data")
    m.set_defaults(func=cmd_estimate_mi)

    s = sub.add_parser("sweep", help="beta or few-shot sweep with CSV and SVG output")
    common(s)
    train_flags(s)
    s.add_argument("--axis", choices=["beta", "demos"], required=True)
    s.add_argument("--values", required=True, help="comma-separated axis values (demos: per task)")
    s.add_argument("--seeds", default="3", help="seed count N (seeds 0..N-1) or a comma-separated list")
    s.add_argument("--jobs", type=_positive_int, default=1, help="parallel worker processes")
    s.add_argument("--data", help="dataset (beta axis) or pool (demos axis); generated if omitted")
    s.add_argument("--resume", help="resume file (default: <out-dir>/sweep_<axis>.resume.jsonl)")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("selfcheck", help="gradient checks, DV identities, Gaussian MI smoke test")
    c.add_argument("--fast", action="store_true", help="skip the Gaussian convergence checks")
    c.add_argument("--inject-fault", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
