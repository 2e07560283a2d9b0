"""
学習を伴う長時間の受け入れテスト（pytest -m slow で実行）

学習済みエージェントの傾向（ランダムより良いか）と、長時間のランダムプレイでの
不変条件を確認する。絶対値ではなく大小関係だけを見る。
"""

import numpy as np
import pytest
from click.testing import CliRunner

from affect_model import AffectModelConfig, build_corpus, generate_synthetic_corpus
from cli import cli
from config import EnvConfig, RunConfig, TrainConfig
from env_core import derive_rng
from env_heist import MAGAZINE, HeistEnv
from env_pirates import PiratesEnv
from env_solidrally import WAYPOINTS_PER_LAP, SolidRallyEnv
from eval_harness import run_condition
from reward_engine import BEHAVIOUR_BOUNDS

pytestmark = pytest.mark.slow

RUNS = 30
DESK_TRAINING = TrainConfig(total_steps=100_000)


def corpus_for(game):
    return build_corpus(generate_synthetic_corpus(game, seed=0, n_sessions=50), AffectModelConfig(), game=game)


def condition_row(game, condition, corpus=None, seed=0):
    config = RunConfig(env=EnvConfig(game=game), train=DESK_TRAINING.model_copy(update={"seed": seed}),
                       runs=RUNS, seed=1000)
    row, _ = run_condition(game, condition, corpus, config, progress=False)
    return row


@pytest.mark.parametrize("game", ["pirates", "heist", "solid"])
def test_random_agents_score_low(game):
    assert condition_row(game, "Random").final_re_mean < 0.1


@pytest.mark.parametrize("game, factor, separate", [
    ("pirates", 2.0, True),
    ("solid", 2.0, True),
    ("heist", 1.0, False),
])
def test_behaviour_agent_beats_random(game, factor, separate):
    random_row = condition_row(game, "Random")
    trained = condition_row(game, "Max Behaviour")
    assert trained.final_re_mean >= factor * random_row.final_re_mean
    if separate:
        assert trained.final_re_mean - trained.final_re_ci95 > random_row.final_re_mean + random_row.final_re_ci95


@pytest.mark.parametrize("game", ["pirates", "solid"])
def test_arousal_agent_raises_mean_affect(game):
    corpus = corpus_for(game)
    random_row = condition_row(game, "Random", corpus)
    trained = condition_row(game, "Max Arousal", corpus)
    assert trained.mean_ra_mean >= random_row.mean_ra_mean + 0.1


def test_cli_runs_are_reproducible(tmp_path):
    runner = CliRunner()
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(cli, ["--quiet", "train", "--game", "solid", "--steps", "4096", "--seed", "3",
                                     "--out", str(out)])
        assert result.exit_code == 0, result.output
        result = runner.invoke(cli, ["--quiet", "eval", "--game", "solid", "--agent", "ppo", "--checkpoint",
                                     str(out / "checkpoint.pt"), "--runs", "5", "--out", str(out / "eval")])
        assert result.exit_code == 0, result.output
        outputs.append(out)
    first, second = outputs
    for name in ("train_log.csv", "eval/runs.csv", "eval/report.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def fuzz(env, n_ticks, check):
    """n_ticks分のランダム行動を流し、tickごとに不変条件を確認する"""
    low, high = BEHAVIOUR_BOUNDS[env.game_id]
    episode = 0
    ticks = 0
    while ticks < n_ticks:
        env.reset(episode)
        rng = derive_rng(episode, "agent")
        previous_score = 0.0
        result = None
        while (result is None or not result.done) and ticks < n_ticks:
            result = env.step(env.sample_action(rng))
            ticks += 1
            assert low <= result.behaviour_reward <= high
            assert result.score >= previous_score
            previous_score = result.score
            check(env)
        episode += 1


def check_pirates(env):
    s, level = env.state, env.level
    for tx in range(int(np.floor(s.x)), int(np.floor(s.x + 0.8 - 1e-9)) + 1):
        for ty in range(int(np.floor(s.y)), int(np.floor(s.y + 0.9 - 1e-9)) + 1):
            if 0 <= tx < level.width and 0 <= ty < level.height:
                assert not level.solid[tx, ty]


def check_heist(env):
    assert 0 <= env.state.ammo <= MAGAZINE


def check_solid(env):
    s = env.state
    assert s.next_waypoint_index == (s.waypoints_passed + 1) % WAYPOINTS_PER_LAP


@pytest.mark.parametrize("env_cls, check", [
    (PiratesEnv, check_pirates),
    (HeistEnv, check_heist),
    (SolidRallyEnv, check_solid),
])
def test_long_random_play_keeps_invariants(env_cls, check):
    fuzz(env_cls(), 100_000, check)
