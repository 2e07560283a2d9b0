import zlib
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from affect_model import AffectSignalSchedule, CorpusFormatError, TransitionCorpus, affect_reward, affect_signal
from reward_engine import BlendConfig, blend

# 全ゲーム共通: 2分で終了、感情モデルは3秒窓
EPISODE_SECONDS = 120
WINDOW_SECONDS = 3
DEFAULT_TICKS_PER_SECOND = 10


class ActionValidationError(ValueError):
    """ActionSpecに合わない行動が渡された"""


class EpisodeLifecycleError(RuntimeError):
    """reset前、または終了済みエピソードでstepが呼ばれた"""


@dataclass(frozen=True)
class ActionSpec:
    discrete_branches: Tuple[int, ...]
    continuous_count: int = 0

    def __post_init__(self):
        if any(n < 2 for n in self.discrete_branches):
            raise ValueError(f"分岐の選択肢数は2以上が必要です: {self.discrete_branches}")
        if self.continuous_count < 0:
            raise ValueError(f"連続値の数が負です: {self.continuous_count}")

    def noop(self) -> "Action":
        """各分岐の「何もしない」行動（3択は中央、2択は0）"""
        discrete = tuple(1 if n == 3 else 0 for n in self.discrete_branches)
        return Action(discrete=discrete, continuous=tuple(0.0 for _ in range(self.continuous_count)))

    def to_dict(self) -> Dict[str, Any]:
        return {"discrete_branches": list(self.discrete_branches), "continuous_count": self.continuous_count}


@dataclass(frozen=True)
class Action:
    discrete: Tuple[int, ...]
    continuous: Tuple[float, ...] = ()


@dataclass
class Observation:
    grid: np.ndarray
    properties: np.ndarray

    def to_bytes(self) -> bytes:
        return self.grid.tobytes() + self.properties.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.grid.shape == other.grid.shape
            and np.array_equal(self.grid, other.grid)
            and np.array_equal(self.properties, other.properties)
        )


@dataclass
class EpisodeClock:
    tick_index: int = 0
    ticks_per_second: int = DEFAULT_TICKS_PER_SECOND
    max_ticks: int = DEFAULT_TICKS_PER_SECOND * EPISODE_SECONDS

    @classmethod
    def for_rate(cls, ticks_per_second: int) -> "EpisodeClock":
        if ticks_per_second < 1:
            raise ValueError(f"ticks_per_secondは1以上が必要です: {ticks_per_second}")
        return cls(0, ticks_per_second, ticks_per_second * EPISODE_SECONDS)

    @property
    def window_ticks(self) -> int:
        return self.ticks_per_second * WINDOW_SECONDS

    @property
    def dt(self) -> float:
        return 1.0 / self.ticks_per_second

    @property
    def expired(self) -> bool:
        return self.tick_index >= self.max_ticks

    @property
    def remaining_fraction(self) -> float:
        return max(0.0, 1.0 - self.tick_index / self.max_ticks)


@dataclass
class StepResult:
    observation: Observation
    score: float
    behaviour_reward: float
    affect_signal: float
    affect_reward: float
    total_reward: float
    done: bool
    tick: int = 0
    affect_emitted: bool = False

    def to_dict(self) -> Dict[str, Any]:
        """プロトコル・ログ出力用の辞書表現"""
        return {
            "observation": observation_to_dict(self.observation),
            "score": self.score,
            "behaviour_reward": self.behaviour_reward,
            "affect_signal": self.affect_signal,
            "affect_reward": self.affect_reward,
            "total_reward": self.total_reward,
            "done": self.done,
            "tick": self.tick,
            "affect_emitted": self.affect_emitted,
        }


def observation_to_dict(obs: Observation) -> Dict[str, Any]:
    return {"grid": obs.grid.tolist(), "properties": obs.properties.tolist()}


def observation_from_dict(payload: Dict[str, Any], grid_shape: Tuple[int, int]) -> Observation:
    grid = np.asarray(payload["grid"], dtype=np.int64).reshape(grid_shape)
    return Observation(grid=grid, properties=np.asarray(payload["properties"], dtype=np.float64))


def derive_rng(seed: int, stream: str) -> np.random.Generator:
    """
    ルートシードから名前付きの独立した乱数ストリームを作る

    ストリーム名ごとにspawn_keyが固定されるため、新しい利用側を追加しても
    既存ストリームの乱数列は変わらない。

    引数:
        seed: ルートシード
        stream: ストリーム名（"layout", "dynamics" など）

    戻り値:
        np.random.Generator: 決定的な乱数生成器
    """
    key = zlib.crc32(stream.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


def validate_action(spec: ActionSpec, action: Action) -> None:
    """行動がActionSpecに合うか厳密に検査（クランプしない）"""
    if len(action.discrete) != len(spec.discrete_branches):
        raise ActionValidationError(
            f"離散行動の分岐数が一致しません: 期待={len(spec.discrete_branches)}, 実際={len(action.discrete)}"
        )
    for branch, (index, cardinality) in enumerate(zip(action.discrete, spec.discrete_branches)):
        if isinstance(index, bool) or not isinstance(index, (int, np.integer)):
            raise ActionValidationError(f"離散行動は整数が必要です: branch={branch}, value={index!r}")
        if not 0 <= index < cardinality:
            raise ActionValidationError(
                f"離散行動のインデックスが範囲外です: branch={branch}, value={index}, 選択肢数={cardinality}"
            )
    if len(action.continuous) != spec.continuous_count:
        raise ActionValidationError(
            f"連続行動の数が一致しません: 期待={spec.continuous_count}, 実際={len(action.continuous)}"
        )
    for slot, value in enumerate(action.continuous):
        if not np.isfinite(value) or not -1.0 <= value <= 1.0:
            raise ActionValidationError(f"連続行動は[-1, 1]の範囲が必要です: slot={slot}, value={value}")


def sample_action(spec: ActionSpec, rng: np.random.Generator) -> Action:
    """行動空間から一様にサンプリング"""
    discrete = tuple(int(rng.integers(0, n)) for n in spec.discrete_branches)
    continuous = tuple(float(v) for v in rng.uniform(-1.0, 1.0, size=spec.continuous_count))
    return Action(discrete=discrete, continuous=continuous)


def flatten_observation(obs: Observation, n_grid_ids: int) -> np.ndarray:
    """グリッドIDをセルごとにone-hot化してプロパティと連結する"""
    if obs.grid.size == 0:
        return obs.properties.astype(np.float32)
    one_hot = np.zeros((obs.grid.size, n_grid_ids), dtype=np.float32)
    one_hot[np.arange(obs.grid.size), obs.grid.ravel()] = 1.0
    return np.concatenate([one_hot.ravel(), obs.properties.astype(np.float32)])


class GameEnv:
    """
    3ゲーム共通の環境基底クラス

    tickごとに: ゲーム固有の状態更新 → 行動報酬R_B → 感情スケジュールへの特徴量P投入
    → Aff_t / R_A → R_tのブレンド、をまとめてStepResultにする。
    サブクラスは _new_state / _tick / _observe / _behaviour_reward / _score /
    _features / _goal_reached を実装する。
    """

    game_id: str = ""
    action_spec: ActionSpec = ActionSpec((2,))
    grid_shape: Tuple[int, int] = (0, 0)
    n_grid_ids: int = 1
    property_size: int = 0
    feature_names: Tuple[str, ...] = ()
    # サブクラスの報酬パラメータ（max_scoreでR_Eを正規化する）
    params: Any = None

    def __init__(
        self,
        ticks_per_second: int = DEFAULT_TICKS_PER_SECOND,
        corpus: Optional[TransitionCorpus] = None,
        blend_config: Optional[BlendConfig] = None,
        track_affect: bool = True,
        affect_mode: str = "window",
        affect_in_observation: bool = False,
    ):
        if corpus is not None and corpus.game and corpus.game != self.game_id:
            raise CorpusFormatError(f"別のゲームのコーパスです: game={self.game_id}, コーパス={corpus.game}")
        if corpus is not None and self.feature_names and corpus.feature_size != len(self.feature_names):
            raise CorpusFormatError(
                f"コーパスのPの長さがゲームと一致しません: game={self.game_id}, "
                f"期待={len(self.feature_names)}, 実際={corpus.feature_size}"
            )
        self.ticks_per_second = ticks_per_second
        self.clock = EpisodeClock.for_rate(ticks_per_second)
        self.corpus = corpus
        self.blend_config = blend_config or BlendConfig.for_game(self.game_id, 0.0)
        # λ=0 の学習中はコーパスに一切問い合わせない（評価時はtrack_affect=Trueで計測する）
        self.track_affect = track_affect
        self.affect_mode = affect_mode
        # 直近に出力された Aff_t をプロパティベクトルの末尾に加える
        self.affect_in_observation = affect_in_observation
        self.last_affect = 0.0
        self.state = None
        self.schedule: Optional[AffectSignalSchedule] = None
        self._done = True
        self._started = False

    @property
    def affect_active(self) -> bool:
        return self.corpus is not None and (self.blend_config.lam > 0 or self.track_affect)

    @property
    def goal_reached(self) -> bool:
        return self.state is not None and self._goal_reached(self.state)

    @property
    def flat_observation_size(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols * self.n_grid_ids + self.observed_property_size

    @property
    def observed_property_size(self) -> int:
        return self.property_size + (1 if self.affect_in_observation else 0)

    @property
    def max_score(self) -> float:
        return self.params.max_score if self.params is not None else 1.0

    def reset(self, seed: int) -> Observation:
        self.seed = int(seed)
        self.layout_rng = derive_rng(seed, "layout")
        self.dynamics_rng = derive_rng(seed, "dynamics")
        self.clock = EpisodeClock.for_rate(self.ticks_per_second)
        self.state = self._new_state(self.layout_rng)
        self.schedule = AffectSignalSchedule(self.clock.window_ticks, mode=self.affect_mode)
        self._done = False
        self._started = True
        self.last_affect = 0.0
        return self._observation(self.state)

    def step(self, action: Action) -> StepResult:
        if not self._started:
            raise EpisodeLifecycleError("reset()の前にstep()が呼ばれました")
        if self._done:
            raise EpisodeLifecycleError("終了済みのエピソードでstep()が呼ばれました。reset()してください")
        validate_action(self.action_spec, action)

        prev = self.state
        cur = self._tick(prev, action)
        self.clock.tick_index += 1
        self.state = cur

        r_b = self._behaviour_reward(prev, cur)
        signal, emitted = 0.0, False
        if self.affect_active:
            signal, emitted = affect_signal(
                self.clock.tick_index, self.schedule, self.corpus, self._features(prev, cur)
            )
        if emitted:
            self.last_affect = float(signal)
        r_a = affect_reward(signal)
        total = blend(r_b, r_a, self.blend_config)

        self._done = self.clock.expired or self._goal_reached(cur)
        return StepResult(
            observation=self._observation(cur),
            score=float(self._score(cur)),
            behaviour_reward=float(r_b),
            affect_signal=float(signal),
            affect_reward=float(r_a),
            total_reward=float(total),
            done=self._done,
            tick=self.clock.tick_index,
            affect_emitted=emitted,
        )

    def _observation(self, state) -> Observation:
        obs = self._observe(state)
        if self.affect_in_observation:
            obs = Observation(grid=obs.grid, properties=np.append(obs.properties, self.last_affect))
        return obs

    def sample_action(self, rng: np.random.Generator) -> Action:
        return sample_action(self.action_spec, rng)

    def flat(self, obs: Observation) -> np.ndarray:
        return flatten_observation(obs, self.n_grid_ids)

    def normalized_score(self, score: float) -> float:
        return score / self.max_score

    # --- サブクラスで実装するフック ---
    def _new_state(self, rng: np.random.Generator):
        raise NotImplementedError

    def _tick(self, state, action: Action):
        raise NotImplementedError

    def _observe(self, state) -> Observation:
        raise NotImplementedError

    def _behaviour_reward(self, prev, cur) -> float:
        raise NotImplementedError

    def _score(self, state) -> float:
        raise NotImplementedError

    def _features(self, prev, cur) -> Sequence[float]:
        raise NotImplementedError

    def _goal_reached(self, state) -> bool:
        return False


def run_actions(env: GameEnv, seed: int, actions: List[Action]) -> List[StepResult]:
    """固定の行動列を再生してStepResult列を返す（決定性の検証用）"""
    env.reset(seed)
    results = []
    for action in actions:
        result = env.step(action)
        results.append(result)
        if result.done:
            break
    return results
