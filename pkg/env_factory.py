from dataclasses import fields
from typing import Any, Dict, Optional, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from affect_model import AffectModelConfig, TransitionCorpus, load_corpus
from config import ConfigError, EnvConfig
from env_core import Action, GameEnv
from env_heist import HeistEnv, HeistRewardParams, load_map
from env_pirates import PiratesEnv, PiratesRewardParams, load_level
from env_solidrally import RallyRewardParams, SolidRallyEnv, load_track
from reward_engine import BlendConfig

ENV_CLASSES = {
    "pirates": (PiratesEnv, PiratesRewardParams, load_level, "level"),
    "heist": (HeistEnv, HeistRewardParams, load_map, "hmap"),
    "solid": (SolidRallyEnv, RallyRewardParams, load_track, "track"),
}


def affect_model_config(config: EnvConfig) -> AffectModelConfig:
    return AffectModelConfig(
        k=config.affect.k,
        stable_epsilon=config.affect.stable_epsilon,
        distance_delta=config.affect.distance_delta,
    )


def load_env_corpus(config: EnvConfig) -> Optional[TransitionCorpus]:
    """設定のコーパスを読み込む（未指定ならNone）"""
    if not config.corpus_path:
        return None
    return load_corpus(config.corpus_path, config.game, affect_model_config(config))


def make_env(config: EnvConfig, corpus: Optional[TransitionCorpus] = None,
             track_affect: bool = True) -> GameEnv:
    """
    EnvConfigからゲーム環境を作る

    corpusを渡した場合はそれを共有し（読み込み済みコーパスは読み取り専用）、
    渡さなければ corpus_path から読み込む。

    引数:
        config: 環境設定
        corpus: 読み込み済みのコーパス
        track_affect: λ=0でも感情信号を計測するか（学習時はFalse）

    戻り値:
        GameEnv: reset前の環境
    """
    env_cls, params_cls, loader, layout_arg = ENV_CLASSES[config.game]
    known = {f.name for f in fields(params_cls)}
    unknown = set(config.reward) - known
    if unknown:
        raise ConfigError(f"報酬パラメータ名が不正です: game={config.game}, 不明={sorted(unknown)}")
    params = params_cls(**config.reward)

    if corpus is None and config.corpus_path:
        corpus = load_env_corpus(config)
    if config.lambda_ > 0 and corpus is None:
        raise ConfigError(f"λ > 0 にはコーパスが必要です: game={config.game}, lambda={config.lambda_}")

    kwargs: Dict[str, Any] = {
        "layout": config.layout,
        "params": params,
        "ticks_per_second": config.ticks_per_second,
        "corpus": corpus,
        "blend_config": BlendConfig.for_game(config.game, config.lambda_),
        "track_affect": track_affect,
        "affect_mode": config.affect.mode,
        "affect_in_observation": config.affect_in_observation,
    }
    if config.layout_path:
        kwargs[layout_arg] = loader(config.layout_path)
    return env_cls(**kwargs)


def action_space_for(env: GameEnv) -> spaces.Tuple:
    spec = env.action_spec
    return spaces.Tuple((
        spaces.MultiDiscrete(list(spec.discrete_branches)),
        spaces.Box(-1.0, 1.0, shape=(spec.continuous_count,), dtype=np.float32),
    ))


class AffectivelyGymEnv(gym.Env):
    """
    任意のゲーム環境をgymnasium.Envとして包む

    観測は平坦化したベクトル、報酬はR_t。StepResultの各値はinfoに入れる。
    時間切れはtruncated、ゴール到達はterminatedとして返す。
    """

    metadata = {"render_modes": []}

    def __init__(self, env: GameEnv):
        self.env = env
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(env.flat_observation_size,), dtype=np.float32)
        self.action_space = action_space_for(env)

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None) -> Tuple[np.ndarray, dict]:
        super().reset(seed=seed)
        if seed is None:
            seed = int(self.np_random.integers(0, 2**31 - 1))
        obs = self.env.reset(seed)
        return self.env.flat(obs), {}

    def step(self, action) -> Tuple[np.ndarray, float, bool, bool, dict]:
        discrete, continuous = action
        result = self.env.step(Action(
            discrete=tuple(int(i) for i in discrete),
            continuous=tuple(float(v) for v in continuous),
        ))
        info = result.to_dict()
        info.pop("observation")
        truncated = result.done and self.env.clock.expired and not self.env.goal_reached
        terminated = result.done and not truncated
        return self.env.flat(result.observation), result.total_reward, terminated, truncated, info


def make_gym_env(config: EnvConfig, **kwargs) -> AffectivelyGymEnv:
    return AffectivelyGymEnv(make_env(config, **kwargs))


if __name__ == "__main__":
    gym_env = make_gym_env(EnvConfig(game="pirates"))
    obs, _ = gym_env.reset(seed=0)
    print(f"観測サイズ={obs.shape}, 行動空間={gym_env.action_space}")
