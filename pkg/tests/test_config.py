from pathlib import Path

import pytest

from bcib.config import ConfigError, RunConfig, load_config, merge, section_defaults

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.toml"))


def test_defaults_resolve_every_section(monkeypatch):
    monkeypatch.delenv("BCIB_OUT", raising=False)
    cfg = load_config()
    assert cfg.out_dir == "bcib-out"
    assert cfg.env.noise_dims == 16
    assert set(section_defaults()) == {"env", "policy", "mine", "train", "eval", "data", "probe"}


def test_out_dir_falls_back_to_environment(monkeypatch):
    monkeypatch.setenv("BCIB_OUT", "/tmp/elsewhere")
    assert load_config().out_dir == "/tmp/elsewhere"
    assert load_config(overrides={"out_dir": "here"}).out_dir == "here"


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('seed = 4\n[train]\nbeta = 0.01\nepochs = 7\n[env]\nkind = "pick_place"\n')
    cfg = load_config(path, {"train": {"epochs": 2}})
    assert (cfg.seed, cfg.train.beta, cfg.train.epochs, cfg.env.kind) == (4, 0.01, 2, "pick_place")
    assert cfg.train_config().seed == 4


def test_toml_round_trip(tmp_path):
    cfg = load_config(overrides={"train": {"beta": 1e-3}, "policy": {"fusion": "temporal_attn"}, "seed": 9})
    path = tmp_path / "echo.toml"
    path.write_text(cfg.to_toml())
    assert load_config(path) == cfg
    assert load_config(path).fingerprint() == cfg.fingerprint()


@pytest.mark.parametrize(
    "data, message",
    [
        ({"train": {"betta": 1.0}}, "unknown key"),
        ({"trian": {}}, "unknown top-level"),
        ({"train": {"seed": 3}}, "unknown key"),
        ({"train": {"epochs": "ten"}}, "integer"),
        ({"train": {"epochs": 1.5}}, "integer"),
        ({"train": {"beta": True}}, "number"),
        ({"policy": {"fusion": "conv"}}, "one of"),
        ({"env": {"noise_dims": -1}}, "noise_dims"),
        ({"policy": {"train_obs_encoder": 1}}, "true or false"),
        ({"train": 3}, "table"),
    ],
)
def test_invalid_values_are_rejected(data, message):
    with pytest.raises(ConfigError, match=message):
        merge(RunConfig(), data)


def test_policy_constraints_checked_up_front():
    with pytest.raises(ConfigError, match="attn_width"):
        load_config(overrides={"policy": {"attn_width": 63}})


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(bad)


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.env.noise_dims == 16
    assert cfg.out_dir.startswith("runs/")


def test_one_config_per_experiment():
    assert {p.stem for p in CONFIGS} == {"beta_sweep", "few_shot", "mi_tracking"}
