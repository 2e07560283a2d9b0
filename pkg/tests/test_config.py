import pytest

from config import (
    ConfigError,
    EnvConfig,
    RunConfig,
    TrainConfig,
    load_config_file,
    merge_overrides,
    read_snapshot,
    validate_config,
    write_snapshot,
)


def test_merge_skips_unset_flags():
    base = {"env": {"game": "heist", "lambda": 0.5}, "runs": 10}
    merged = merge_overrides(base, {"env": {"game": None, "lambda": 1.0}, "runs": None, "seed": 4})
    assert merged == {"env": {"game": "heist", "lambda": 1.0}, "runs": 10, "seed": 4}
    assert base["env"]["lambda"] == 0.5


def test_seeds_default_to_consecutive_values():
    config = RunConfig(env=EnvConfig(game="solid"), seed=7, runs=3)
    assert config.seeds == [7, 8, 9]


def test_explicit_seeds_must_match_runs():
    data = {"env": {"game": "solid"}, "runs": 3, "seeds": [1, 2]}
    with pytest.raises(ConfigError):
        validate_config(RunConfig, data)
    assert validate_config(RunConfig, {**data, "seeds": [5, 1, 3]}).seeds == [5, 1, 3]


def test_lambda_alias_and_range():
    assert EnvConfig.model_validate({"game": "pirates", "lambda": 0.25}).lambda_ == 0.25
    with pytest.raises(ConfigError):
        validate_config(EnvConfig, {"game": "pirates", "lambda": 1.5})
    with pytest.raises(ConfigError):
        validate_config(EnvConfig, {"game": "chess"})


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        validate_config(RunConfig, {"env": {"game": "solid"}, "epochs": 3})
    with pytest.raises(ConfigError):
        validate_config(RunConfig, {"env": {"game": "solid", "affect": {"k": 5, "radius": 2}}})


def test_train_config_bounds():
    with pytest.raises(ConfigError):
        validate_config(TrainConfig, {"clip_ratio": 0.0})
    assert TrainConfig().gamma == 0.99


def test_snapshot_round_trip(tmp_path):
    config = RunConfig(
        env=EnvConfig(game="heist", reward={"kill_value": 15.0}, **{"lambda": 0.5}),
        train=TrainConfig(total_steps=128, seed=2),
        runs=2,
        output_dir=str(tmp_path),
        condition="Blended",
    )
    path = write_snapshot(config, str(tmp_path))
    assert path.endswith("config.json")
    assert '"lambda": 0.5' in (tmp_path / "config.json").read_text(encoding="utf-8")
    assert read_snapshot(str(tmp_path)) == config


def test_load_config_file(tmp_path):
    assert load_config_file(None) == {}
    bad = tmp_path / "bad.json"
    bad.write_text("{game: solid", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config_file(str(bad))
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config_file(str(listed))
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "missing.json"))
