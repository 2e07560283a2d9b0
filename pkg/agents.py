import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.distributions import Categorical, Normal
from tqdm import tqdm

from config import ConfigError, TrainConfig
from env_core import Action, ActionSpec, GameEnv, Observation, derive_rng, flatten_observation, sample_action

CHECKPOINT_VERSION = "affectively-ckpt/1"
TRAIN_LOG_COLUMNS = ["update", "steps", "mean_episode_score", "mean_reward", "policy_loss", "value_loss", "entropy"]


class UpdateAbortedError(RuntimeError):
    """損失が有限でないためPPO更新を中止した（パラメータは更新前に戻してある）"""


def tanh_log_det(pre_tanh: torch.Tensor) -> torch.Tensor:
    """log(1 - tanh(u)^2) を数値的に安定な形で"""
    return 2.0 * (math.log(2.0) - pre_tanh - F.softplus(-2.0 * pre_tanh))


class ActorCritic(nn.Module):
    """
    方策と価値の小さな全結合ネットワーク

    離散分岐ごとのカテゴリカルヘッドと、連続値用のtanhで[-1, 1]に押し込む
    ガウスヘッド（平均は出力、log標準偏差は状態に依存しないパラメータ）を持つ。
    """

    def __init__(self, obs_size: int, action_spec: ActionSpec, hidden_size: int = 64):
        super().__init__()
        self.obs_size = obs_size
        self.action_spec = action_spec
        self.policy_net = nn.Sequential(
            nn.Linear(obs_size, hidden_size), nn.Tanh(),
            nn.Linear(hidden_size, hidden_size), nn.Tanh(),
        )
        self.value_net = nn.Sequential(
            nn.Linear(obs_size, hidden_size), nn.Tanh(),
            nn.Linear(hidden_size, hidden_size), nn.Tanh(),
            nn.Linear(hidden_size, 1),
        )
        self.branch_heads = nn.ModuleList([nn.Linear(hidden_size, n) for n in action_spec.discrete_branches])
        self.continuous_count = action_spec.continuous_count
        self.mean_head = nn.Linear(hidden_size, self.continuous_count) if self.continuous_count else None
        self.log_std = nn.Parameter(torch.zeros(self.continuous_count))

    def forward(self, obs: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor, torch.Tensor]:
        features = self.policy_net(obs)
        logits = [head(features) for head in self.branch_heads]
        if self.mean_head is not None:
            mean = self.mean_head(features)
        else:
            mean = features.new_zeros((obs.shape[0], 0))
        value = self.value_net(obs).squeeze(-1)
        return logits, mean, value

    def evaluate_actions(self, obs: torch.Tensor, discrete: torch.Tensor,
                         pre_tanh: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        与えた行動の対数確率・エントロピー・状態価値

        引数:
            obs: (N, obs_size)
            discrete: (N, 分岐数) の選択インデックス
            pre_tanh: (N, 連続値数) のtanh前の値

        戻り値:
            Tuple: (log_prob (N,), entropy (N,), value (N,))
        """
        logits, mean, value = self(obs)
        log_prob = value.new_zeros(obs.shape[0])
        entropy = value.new_zeros(obs.shape[0])
        for branch, branch_logits in enumerate(logits):
            dist = Categorical(logits=branch_logits)
            log_prob = log_prob + dist.log_prob(discrete[:, branch])
            entropy = entropy + dist.entropy()
        if self.continuous_count:
            normal = Normal(mean, self.log_std.exp().expand_as(mean))
            # tanhによる変数変換の補正項
            log_prob = log_prob + (normal.log_prob(pre_tanh) - tanh_log_det(pre_tanh)).sum(-1)
            entropy = entropy + normal.entropy().sum(-1)
        return log_prob, entropy, value

    @torch.no_grad()
    def sample(self, obs: np.ndarray, generator: torch.Generator) -> Tuple[Tuple[int, ...], np.ndarray, float, float]:
        """1観測から行動をサンプリングし、(離散, tanh前の連続値, 対数確率, 価値) を返す"""
        x = torch.as_tensor(obs, dtype=torch.float32).unsqueeze(0)
        logits, mean, _ = self(x)
        discrete = tuple(
            int(torch.multinomial(torch.softmax(branch_logits[0], dim=-1), 1, generator=generator))
            for branch_logits in logits
        )
        pre_tanh = mean
        if self.continuous_count:
            noise = torch.randn(mean.shape, generator=generator)
            pre_tanh = mean + self.log_std.exp() * noise
        log_prob, _, value = self.evaluate_actions(x, torch.tensor([discrete], dtype=torch.int64), pre_tanh)
        return discrete, pre_tanh[0].numpy().astype(np.float32), float(log_prob[0]), float(value[0])

    @torch.no_grad()
    def value(self, obs: np.ndarray) -> float:
        x = torch.as_tensor(obs, dtype=torch.float32).unsqueeze(0)
        return float(self.value_net(x)[0, 0])


def to_action(discrete: Sequence[int], pre_tanh: np.ndarray) -> Action:
    continuous = tuple(float(min(1.0, max(-1.0, v))) for v in np.tanh(pre_tanh))
    return Action(discrete=tuple(int(i) for i in discrete), continuous=continuous)


@dataclass
class RolloutBuffer:
    obs: List[np.ndarray] = field(default_factory=list)
    discrete: List[Tuple[int, ...]] = field(default_factory=list)
    pre_tanh: List[np.ndarray] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    dones: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, obs: np.ndarray, discrete: Tuple[int, ...], pre_tanh: np.ndarray, log_prob: float,
            reward: float, value: float, done: bool) -> None:
        self.obs.append(obs)
        self.discrete.append(discrete)
        self.pre_tanh.append(pre_tanh)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.dones.append(done)

    def compute_gae(self, last_value: float, gamma: float, gae_lambda: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        GAEによるアドバンテージと価値の目標値

        エピソード終了（時間切れを含む）の直後はブートストラップしない。

        引数:
            last_value: バッファ末尾の次の状態の価値（末尾がエピソード終了なら無視される）
            gamma: 割引率
            gae_lambda: GAEのλ

        戻り値:
            Tuple[np.ndarray, np.ndarray]: (advantages, returns)
        """
        n = len(self)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        dones = np.asarray(self.dones, dtype=np.float64)
        advantages = np.zeros(n, dtype=np.float64)
        gae = 0.0
        for t in reversed(range(n)):
            next_value = last_value if t == n - 1 else values[t + 1]
            not_done = 1.0 - dones[t]
            delta = rewards[t] + gamma * next_value * not_done - values[t]
            gae = delta + gamma * gae_lambda * not_done * gae
            advantages[t] = gae
        return advantages, advantages + values


def normalize_advantages(advantages: torch.Tensor) -> torch.Tensor:
    """ミニバッチ内で平均0・分散1にする（母分散を使う）"""
    centered = advantages - advantages.mean()
    if advantages.numel() < 2:
        return centered
    return centered / (advantages.std(unbiased=False) + 1e-8)


def clipped_surrogate_loss(ratio: torch.Tensor, advantages: torch.Tensor, clip_ratio: float) -> torch.Tensor:
    """クリップ付き代理目的関数の符号を反転したもの（最小化する損失）"""
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    return -torch.min(unclipped, clipped).mean()


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float


def ppo_update(policy: ActorCritic, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer,
               config: TrainConfig, generator: torch.Generator, last_value: float = 0.0) -> UpdateStats:
    """
    1回分のロールアウトでPPO更新を行う（policyをその場で更新する）

    損失が有限でなくなった場合は更新前のパラメータとオプティマイザ状態に戻して
    UpdateAbortedErrorを投げる。

    引数:
        policy: 更新する方策
        optimizer: policyのパラメータを持つオプティマイザ
        buffer: 収集済みのロールアウト
        config: 学習設定
        generator: ミニバッチのシャッフル用
        last_value: バッファ末尾の次の状態の価値

    戻り値:
        UpdateStats: 最後のエポックの平均損失
    """
    advantages, returns = buffer.compute_gae(last_value, config.gamma, config.gae_lambda)
    obs = torch.as_tensor(np.stack(buffer.obs), dtype=torch.float32)
    discrete = torch.as_tensor(np.asarray(buffer.discrete, dtype=np.int64).reshape(len(buffer), -1))
    # 連続値がないゲームでは (N, 0) のまま渡す
    pre_tanh = torch.as_tensor(np.stack(buffer.pre_tanh), dtype=torch.float32)
    old_log_probs = torch.as_tensor(buffer.log_probs, dtype=torch.float32)
    advantages_t = torch.as_tensor(advantages, dtype=torch.float32)
    returns_t = torch.as_tensor(returns, dtype=torch.float32)

    policy_snapshot = copy.deepcopy(policy.state_dict())
    optimizer_snapshot = copy.deepcopy(optimizer.state_dict())

    n = len(buffer)
    for epoch in range(config.epochs):
        policy_losses, value_losses, entropies = [], [], []
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            log_prob, entropy, value = policy.evaluate_actions(obs[idx], discrete[idx], pre_tanh[idx])
            ratio = torch.exp(log_prob - old_log_probs[idx])
            policy_loss = clipped_surrogate_loss(ratio, normalize_advantages(advantages_t[idx]), config.clip_ratio)
            value_loss = 0.5 * F.mse_loss(value, returns_t[idx])
            entropy_mean = entropy.mean()
            loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy_mean
            if not torch.isfinite(loss):
                policy.load_state_dict(policy_snapshot)
                optimizer.load_state_dict(optimizer_snapshot)
                raise UpdateAbortedError(
                    f"損失が有限ではありません: epoch={epoch}, policy={float(policy_loss)}, "
                    f"value={float(value_loss)}, entropy={float(entropy_mean)}"
                )
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), config.max_grad_norm)
            optimizer.step()
            policy_losses.append(float(policy_loss))
            value_losses.append(float(value_loss))
            entropies.append(float(entropy_mean))

    return UpdateStats(float(np.mean(policy_losses)), float(np.mean(value_losses)), float(np.mean(entropies)))


def make_policy(env: GameEnv, config: TrainConfig) -> ActorCritic:
    torch.manual_seed(config.seed)
    return ActorCritic(env.flat_observation_size, env.action_spec, config.hidden_size)


def train(env: GameEnv, config: TrainConfig, progress: bool = True,
          log_path: Optional[str] = None) -> Tuple[ActorCritic, List[Dict[str, float]]]:
    """
    PPOで方策を学習する

    エピソードのシードは config.seed から導いた "episodes" ストリームで決まるので、
    同じ設定なら同じ学習結果になる。

    引数:
        env: 学習する環境（track_affect=Falseで作っておくとλ=0でコーパスに問い合わせない）
        config: 学習設定
        progress: tqdmの進捗表示
        log_path: train_log.csv の出力先

    戻り値:
        Tuple: (学習済み方策, 更新ごとのログ行)
    """
    policy = make_policy(env, config)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.learning_rate, eps=1e-5)
    generator = torch.Generator().manual_seed(config.seed)
    episode_seeds = derive_rng(config.seed, "episodes")

    def next_episode() -> np.ndarray:
        return env.flat(env.reset(int(episode_seeds.integers(0, 2**31 - 1))))

    obs = next_episode()
    steps, update = 0, 0
    rows: List[Dict[str, float]] = []
    with tqdm(total=config.total_steps, disable=not progress, desc=f"学習 {env.game_id}") as bar:
        while steps < config.total_steps:
            buffer = RolloutBuffer()
            finished_scores = []
            length = min(config.rollout_length, config.total_steps - steps)
            for _ in range(length):
                discrete, pre_tanh, log_prob, value = policy.sample(obs, generator)
                result = env.step(to_action(discrete, pre_tanh))
                buffer.add(obs, discrete, pre_tanh, log_prob, result.total_reward, value, result.done)
                if result.done:
                    finished_scores.append(result.score)
                    obs = next_episode()
                else:
                    obs = env.flat(result.observation)
            steps += length
            bar.update(length)

            last_value = 0.0 if buffer.dones[-1] else policy.value(obs)
            try:
                stats = ppo_update(policy, optimizer, buffer, config, generator, last_value)
            except UpdateAbortedError as e:
                tqdm.write(f"警告: 更新{update}を中止しました: {e}")
                stats = UpdateStats(float("nan"), float("nan"), float("nan"))
            rows.append({
                "update": update,
                "steps": steps,
                "mean_episode_score": float(np.mean(finished_scores)) if finished_scores else float("nan"),
                "mean_reward": float(np.mean(buffer.rewards)),
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "entropy": stats.entropy,
            })
            update += 1

    if log_path:
        pd.DataFrame(rows, columns=TRAIN_LOG_COLUMNS).to_csv(log_path, index=False)
    return policy, rows


def random_policy(obs: Optional[Observation], rng: np.random.Generator, spec: ActionSpec) -> Action:
    """観測を見ずに行動空間から一様サンプリング"""
    return sample_action(spec, rng)


class RandomAgent:
    def __init__(self, spec: ActionSpec):
        self.spec = spec

    def act(self, obs: Observation, rng: np.random.Generator) -> Action:
        return random_policy(obs, rng, self.spec)


class PPOAgent:
    """学習済み方策から確率的に行動をサンプリングするエージェント"""

    def __init__(self, policy: ActorCritic, n_grid_ids: int):
        self.policy = policy
        self.n_grid_ids = n_grid_ids

    def act(self, obs: Observation, rng: np.random.Generator) -> Action:
        generator = torch.Generator().manual_seed(int(rng.integers(0, 2**62)))
        discrete, pre_tanh, _, _ = self.policy.sample(flatten_observation(obs, self.n_grid_ids), generator)
        return to_action(discrete, pre_tanh)


@dataclass
class EpisodeRecord:
    seed: int
    final_score: float
    normalized_score: float
    mean_affect: float
    affect_values: Tuple[float, ...]
    ticks: int


def run_episode(agent, env: GameEnv, seed: int) -> EpisodeRecord:
    obs = env.reset(seed)
    rng = derive_rng(seed, "agent")
    affect_values = []
    result = None
    while result is None or not result.done:
        result = env.step(agent.act(obs, rng))
        obs = result.observation
        if result.affect_emitted:
            affect_values.append(result.affect_signal)
    mean_affect = float(np.mean(affect_values)) if affect_values else float("nan")
    normalized = min(1.0, max(0.0, env.normalized_score(result.score)))
    return EpisodeRecord(seed, result.score, normalized, mean_affect, tuple(affect_values), result.tick)


def evaluate(agent, env: GameEnv, n_runs: int = 30, seed: int = 0, seeds: Optional[Sequence[int]] = None,
             progress: bool = False) -> List[EpisodeRecord]:
    """
    n_runs回のエピソードを方策からのサンプリングで実行する

    run i はシード seeds[i]（未指定なら seed + i）で環境をresetし、行動の乱数も同じシードから導く。

    引数:
        agent: act(obs, rng) を持つエージェント
        env: 評価する環境（感情信号を計測するにはコーパス付きで作る）
        n_runs: 実行回数
        seed: 最初のシード
        seeds: runごとのシード（指定時はn_runsより優先）

    戻り値:
        List[EpisodeRecord]: 実行ごとの記録
    """
    if seeds is None:
        seeds = [seed + i for i in range(n_runs)]
    records = []
    for run_seed in tqdm(seeds, disable=not progress, desc=f"評価 {env.game_id}"):
        records.append(run_episode(agent, env, int(run_seed)))
    return records


def save_checkpoint(path: str, policy: ActorCritic, game: str, train_config: TrainConfig) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "game": game,
        "obs_size": policy.obs_size,
        "action_spec": policy.action_spec.to_dict(),
        "policy_state": policy.state_dict(),
        "train_config": train_config.model_dump(),
    }, path)
    print(f"チェックポイントを保存しました: {path}")


def load_checkpoint(path: str, game: Optional[str] = None) -> Tuple[ActorCritic, Dict[str, Any]]:
    """チェックポイントを読み込み、バージョンとゲームを検査して方策を復元する"""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as e:
        raise ConfigError(f"チェックポイントを開けません: path={path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"チェックポイントのバージョンが不正です: path={path}")
    if game is not None and payload["game"] != game:
        raise ConfigError(f"チェックポイントのゲームが一致しません: 期待={game}, 実際={payload['game']}, path={path}")
    spec = ActionSpec(tuple(payload["action_spec"]["discrete_branches"]), payload["action_spec"]["continuous_count"])
    train_config = TrainConfig(**payload["train_config"])
    policy = ActorCritic(payload["obs_size"], spec, train_config.hidden_size)
    policy.load_state_dict(payload["policy_state"])
    return policy, payload


if __name__ == "__main__":
    from env_solidrally import SolidRallyEnv

    env = SolidRallyEnv(track_affect=False)
    policy, log = train(env, TrainConfig(total_steps=4096, rollout_length=1024))
    records = evaluate(PPOAgent(policy, env.n_grid_ids), SolidRallyEnv(), n_runs=3)
    print([r.normalized_score for r in records])
