import json

import pandas as pd
import pytest
from click.testing import CliRunner

from cli import cli
from config import read_snapshot


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, ["--quiet", *[str(a) for a in args]])


def test_corpus_gen_is_deterministic(runner, tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (first, second):
        result = invoke(runner, "corpus", "gen", "--game", "solid", "--sessions", 4, "--windows", 8,
                        "--seed", 11, "--out", path)
        assert result.exit_code == 0, result.output
    assert first.read_bytes() == second.read_bytes()


def test_corpus_stats(runner, tmp_path):
    path = tmp_path / "corpus.csv"
    invoke(runner, "corpus", "gen", "--game", "heist", "--sessions", 3, "--windows", 10, "--out", path)
    result = invoke(runner, "corpus", "stats", path)
    assert result.exit_code == 0, result.output
    assert "sessions: 3" in result.output
    assert "windows: 30" in result.output
    assert "p_4:" in result.output


def test_corpus_stats_rejects_missing_file(runner, tmp_path):
    result = invoke(runner, "corpus", "stats", tmp_path / "missing.csv")
    assert result.exit_code == 1
    assert "エラー" in result.output


def test_eval_random_writes_report(runner, tmp_path):
    corpus_path = tmp_path / "solid_corpus.csv"
    invoke(runner, "corpus", "gen", "--game", "solid", "--sessions", 10, "--out", corpus_path)
    out = tmp_path / "eval"
    result = invoke(runner, "eval", "--game", "solid", "--corpus", corpus_path, "--runs", 2, "--seed", 3,
                    "--out", out)
    assert result.exit_code == 0, result.output
    assert "Solid Rally" in result.output
    runs = pd.read_csv(out / "runs.csv")
    assert runs["seed"].tolist() == [3, 4]
    assert (out / "report.csv").exists()
    snapshot = read_snapshot(str(out))
    assert snapshot.condition == "Random"
    assert snapshot.seeds == [3, 4]


def test_eval_with_lambda_needs_corpus(runner, tmp_path):
    result = invoke(runner, "eval", "--game", "solid", "--lambda", 0.5, "--runs", 1, "--out", tmp_path)
    assert result.exit_code == 1
    assert "エラー" in result.output


def test_usage_errors_exit_with_two(runner):
    assert invoke(runner, "eval", "--game", "solid", "--bogus").exit_code == 2
    assert invoke(runner, "eval", "--game", "tetris").exit_code == 2
    assert invoke(runner, "eval", "--game", "solid", "--lambda", 1.5).exit_code == 2


def test_ppo_without_checkpoint_is_an_error(runner, tmp_path):
    result = invoke(runner, "eval", "--game", "solid", "--agent", "ppo", "--out", tmp_path)
    assert result.exit_code == 1


def test_config_file_supplies_defaults(runner, tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"env": {"game": "solid"}, "runs": 1, "seed": 9}), encoding="utf-8")
    out = tmp_path / "eval"
    result = invoke(runner, "eval", "--config", config_path, "--out", out)
    assert result.exit_code == 0, result.output
    assert pd.read_csv(out / "runs.csv")["seed"].tolist() == [9]


def test_config_file_with_unknown_key_is_rejected(runner, tmp_path):
    config_path = tmp_path / "run.json"
    config_path.write_text(json.dumps({"env": {"game": "solid", "speed": 3}}), encoding="utf-8")
    result = invoke(runner, "eval", "--config", config_path, "--out", tmp_path)
    assert result.exit_code == 1


def test_train_then_evaluate_checkpoint(runner, tmp_path):
    train_dir = tmp_path / "train"
    result = invoke(runner, "train", "--game", "solid", "--steps", 64, "--seed", 1, "--out", train_dir)
    assert result.exit_code == 0, result.output
    assert (train_dir / "checkpoint.pt").exists()
    log = pd.read_csv(train_dir / "train_log.csv")
    assert log["steps"].iloc[-1] == 64

    eval_dir = tmp_path / "eval"
    result = invoke(runner, "eval", "--game", "solid", "--agent", "ppo", "--checkpoint", train_dir / "checkpoint.pt",
                    "--runs", 1, "--out", eval_dir)
    assert result.exit_code == 0, result.output
    assert "Max Behaviour" in result.output


def test_checkpoint_from_another_game_is_rejected(runner, tmp_path):
    invoke(runner, "train", "--game", "solid", "--steps", 32, "--out", tmp_path)
    result = invoke(runner, "eval", "--game", "pirates", "--agent", "ppo", "--checkpoint",
                    tmp_path / "checkpoint.pt", "--runs", 1, "--out", tmp_path / "eval")
    assert result.exit_code == 1


def test_serve_rejects_invalid_config_before_listening(runner):
    result = invoke(runner, "serve", "--game", "solid", "--lambda", 0.5, "--port", 0, "--health-port", 0)
    assert result.exit_code == 1
    assert "コーパス" in result.output


def test_play_random(runner):
    result = invoke(runner, "play-random", "--game", "solid", "--seed", 2)
    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert lines[0].startswith("tick")
    assert lines[-1].startswith("終了: tick=1200")


def test_table_and_recompute_from_dir(runner, tmp_path):
    out = tmp_path / "table"
    result = invoke(runner, "table", "--games", "solid", "--conditions", "random,blended", "--runs", 2,
                    "--corpus-dir", tmp_path / "no_corpora", "--out", out)
    assert result.exit_code == 0, result.output
    assert "警告" in result.output
    assert (out / "solid" / "random" / "runs.csv").exists()
    assert not (out / "solid" / "blended").exists()

    recomputed = invoke(runner, "table", "--from-dir", out)
    assert recomputed.exit_code == 0, recomputed.output
    assert "Solid Rally" in recomputed.output
    assert "Random" in recomputed.output


def test_table_rejects_unknown_game(runner, tmp_path):
    result = invoke(runner, "table", "--games", "foo", "--out", tmp_path)
    assert result.exit_code == 1
    assert "foo" in result.output


def test_table_rejects_unknown_condition(runner, tmp_path):
    result = invoke(runner, "table", "--games", "solid", "--conditions", "greedy", "--out", tmp_path)
    assert result.exit_code == 1
