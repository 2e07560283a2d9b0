import os
import threading
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

# ゲームごとの特徴量ベクトルP（3秒窓で平均する）
GAME_FEATURES: Dict[str, Tuple[str, ...]] = {
    "pirates": ("score", "health", "x_position", "coins_collected", "deaths"),
    "heist": ("kills", "ammo", "health", "visited_cubes", "distance_moved"),
    "solid": ("speed", "waypoints_passed", "angle_to_waypoint", "off_track", "distance_moved"),
}

# 合成コーパスで覚醒度の上昇と相関させる特徴量（中心値とスケール）
GROUND_TRUTH: Dict[str, Tuple[str, float, float]] = {
    "pirates": ("x_position", 60.0, 40.0),
    "heist": ("visited_cubes", 6.0, 4.0),
    "solid": ("speed", 8.0, 5.0),
}

CSV_FIXED_COLUMNS = ["session_id", "window_index", "arousal"]


class CorpusFormatError(ValueError):
    """コーパスの形式が不正（P長の不一致、ヘッダー不正など）"""


class CorpusBuildError(ValueError):
    """コーパスを構築できない（安定遷移の除外後に空など）"""


class AffectModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(5, ge=1)
    stable_epsilon: float = Field(1e-6, ge=0.0)
    distance: Literal["euclidean"] = "euclidean"
    distance_delta: float = Field(1e-6, gt=0.0)
    # build_corpusで埋まる標準化の統計量
    feature_mean: Optional[List[float]] = None
    feature_std: Optional[List[float]] = None


@dataclass(frozen=True)
class FeatureWindow:
    session_id: str
    window_index: int
    features: Tuple[float, ...]
    mean_arousal: float


@dataclass(frozen=True)
class TransitionRecord:
    prev: FeatureWindow
    cur: FeatureWindow
    label: int  # 0 = 低下, 1 = 上昇


Session = List[FeatureWindow]


class InverseDistanceKNN(BaseEstimator, RegressorMixin):
    """
    逆距離重み付けのk近傍回帰

    同距離の近傍は order（小さいほど優先）で順位付けするため、
    近傍集合は常に一意に決まる。
    """

    def __init__(self, n_neighbors: int = 5, delta: float = 1e-6):
        self.n_neighbors = n_neighbors
        self.delta = delta

    def fit(self, X, y, order=None):
        self.embeddings_ = np.asarray(X, dtype=np.float64)
        self.labels_ = np.asarray(y, dtype=np.float64)
        if order is None:
            order = np.arange(len(self.labels_))
        self.order_ = np.asarray(order, dtype=np.int64)
        return self

    def kneighbors(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """近い順に並んだ (インデックス, 距離) を返す"""
        check_is_fitted(self, "embeddings_")
        diff = self.embeddings_ - np.asarray(x, dtype=np.float64)
        dists = np.sqrt(np.sum(diff * diff, axis=1))
        k = min(self.n_neighbors, len(dists))
        # k番目の距離以下を候補にしてから (距離, order) で全順序ソート
        kth = np.partition(dists, k - 1)[k - 1]
        candidates = np.flatnonzero(dists <= kth)
        ranked = candidates[np.lexsort((self.order_[candidates], dists[candidates]))]
        chosen = ranked[:k]
        return chosen, dists[chosen]

    def predict_one(self, x: np.ndarray) -> float:
        indices, dists = self.kneighbors(x)
        weights = 1.0 / (dists + self.delta)
        return float(np.sum(weights * self.labels_[indices]) / np.sum(weights))

    def predict(self, X) -> np.ndarray:
        return np.array([self.predict_one(row) for row in np.atleast_2d(X)])


class TransitionCorpus:
    """ラベル付き遷移の集合と、それに対する覚醒度変化の問い合わせ"""

    def __init__(self, game: str, records: List[TransitionRecord], config: AffectModelConfig,
                 scaler: StandardScaler, discarded: int = 0):
        self.game = game
        self.records = records
        self.config = config
        self.scaler = scaler
        self.discarded = discarded
        self.feature_size = len(records[0].prev.features)

        keys = sorted(range(len(records)), key=lambda i: (records[i].prev.session_id, records[i].prev.window_index))
        order = np.empty(len(records), dtype=np.int64)
        order[keys] = np.arange(len(records))

        prev = self.standardize(np.array([r.prev.features for r in records], dtype=np.float64))
        cur = self.standardize(np.array([r.cur.features for r in records], dtype=np.float64))
        self.embeddings = np.hstack([prev, cur])
        self.labels = np.array([r.label for r in records], dtype=np.float64)
        self.knn = InverseDistanceKNN(n_neighbors=config.k, delta=config.distance_delta)
        self.knn.fit(self.embeddings, self.labels, order=order)

        self._lock = threading.Lock()
        self.query_count = 0

    def __len__(self) -> int:
        return len(self.records)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return self.scaler.transform(np.atleast_2d(features))

    def embed(self, prev_p: Sequence[float], cur_p: Sequence[float]) -> np.ndarray:
        prev = np.asarray(prev_p, dtype=np.float64)
        cur = np.asarray(cur_p, dtype=np.float64)
        if prev.shape != (self.feature_size,) or cur.shape != (self.feature_size,):
            raise CorpusFormatError(
                f"Pの長さがコーパスと一致しません: 期待={self.feature_size}, prev={prev.shape}, cur={cur.shape}"
            )
        return np.concatenate([self.standardize(prev)[0], self.standardize(cur)[0]])

    def query(self, prev_p: Sequence[float], cur_p: Sequence[float]) -> float:
        return query_arousal_change(prev_p, cur_p, self, self.config)


def _label_transition(delta: float, epsilon: float) -> Optional[int]:
    if delta > epsilon:
        return 1
    if delta < -epsilon:
        return 0
    return None


def build_corpus(sessions: Sequence[Session], config: AffectModelConfig, game: str = "") -> TransitionCorpus:
    """
    覚醒度つきプレイトレースから遷移コーパスを構築する

    連続する窓のペアを平均覚醒度の変化で上昇/低下にラベル付けし、
    安定（|Δ| <= stable_epsilon）なペアは捨てる。特徴量はコーパス全体の
    統計量でz標準化し、その統計量をconfigに書き戻す。

    引数:
        sessions: セッションごとの FeatureWindow のリスト
        config: 感情モデルの設定
        game: ゲームID

    戻り値:
        TransitionCorpus: 構築済みコーパス
    """
    if not sessions:
        raise CorpusBuildError("セッションが1つもありません")

    lengths = {len(w.features) for session in sessions for w in session}
    if len(lengths) != 1:
        raise CorpusFormatError(f"Pの長さがセッション間で一致しません: {sorted(lengths)}")

    records: List[TransitionRecord] = []
    discarded = 0
    for session in sessions:
        if len(session) < 2:
            raise CorpusFormatError(f"セッションの窓が2つ未満です: session_id={session[0].session_id if session else '?'}")
        ordered = sorted(session, key=lambda w: w.window_index)
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.window_index != prev.window_index + 1:
                continue
            label = _label_transition(cur.mean_arousal - prev.mean_arousal, config.stable_epsilon)
            if label is None:
                discarded += 1
                continue
            records.append(TransitionRecord(prev=prev, cur=cur, label=label))

    if not records:
        raise CorpusBuildError(f"安定遷移を除外した結果、コーパスが空になりました (除外数={discarded})")

    all_windows = np.array([w.features for session in sessions for w in session], dtype=np.float64)
    scaler = StandardScaler().fit(all_windows)
    fitted = config.model_copy(update={
        "feature_mean": scaler.mean_.tolist(),
        "feature_std": scaler.scale_.tolist(),
    })
    return TransitionCorpus(game, records, fitted, scaler, discarded=discarded)


def query_arousal_change(prev_p: Sequence[float], cur_p: Sequence[float],
                         corpus: TransitionCorpus, config: AffectModelConfig) -> float:
    """
    問い合わせ遷移に近いk件の遷移ラベルを逆距離で重み付け平均する

    0は「全員が低下」、1は「全員が上昇」。コーパスがkより小さいときは全件を使う。
    """
    with corpus._lock:
        corpus.query_count += 1
    return corpus.knn.predict_one(corpus.embed(prev_p, cur_p))


class AffectSignalSchedule:
    """
    エピソード中の特徴量を窓ごとに平均し、窓の境界でだけ問い合わせる

    mode="window": 窓の間のtickは0（既定）
    mode="hold_last": 直前に計算した値を窓の間も出し続ける
    """

    def __init__(self, window_ticks: int, mode: str = "window"):
        if mode not in ("window", "hold_last"):
            raise ValueError(f"未対応のmodeです: {mode}")
        self.window_ticks = window_ticks
        self.mode = mode
        self.accumulator: Optional[np.ndarray] = None
        self.count = 0
        self.previous_mean: Optional[np.ndarray] = None
        self.last_value = 0.0
        self.emissions: List[float] = []

    def push(self, tick: int, features: Sequence[float], corpus: TransitionCorpus) -> Tuple[float, bool]:
        """tickの特徴量を積算し、(Aff_t, 問い合わせたかどうか) を返す"""
        row = np.asarray(features, dtype=np.float64)
        self.accumulator = row.copy() if self.accumulator is None else self.accumulator + row
        self.count += 1

        if tick % self.window_ticks != 0:
            return (self.last_value if self.mode == "hold_last" else 0.0), False

        mean = self.accumulator / self.count
        self.accumulator, self.count = None, 0
        previous, self.previous_mean = self.previous_mean, mean
        if previous is None:
            # 最初の窓には比較対象がない
            return 0.0, False

        value = corpus.query(previous, mean)
        self.last_value = value
        self.emissions.append(value)
        return value, True


def affect_signal(tick: int, schedule: AffectSignalSchedule, corpus: TransitionCorpus,
                  features: Sequence[float]) -> Tuple[float, bool]:
    return schedule.push(tick, features, corpus)


def affect_reward(signal: float) -> float:
    # 覚醒度の最大化: 上昇の予測値がそのまま報酬
    return signal


def generate_synthetic_corpus(game: str, seed: int, n_sessions: int, n_windows: int = 40) -> List[Session]:
    """
    合成の覚醒度つきトレースを生成する

    各窓の覚醒度変化はゲームごとの基準特徴量（GROUND_TRUTH）を標準化した値に
    比例させるので、その特徴量が大きい窓ほど覚醒度が上がる。

    引数:
        game: "pirates" / "heist" / "solid"
        seed: 乱数シード
        n_sessions: セッション数（1以上）
        n_windows: セッションあたりの窓数

    戻り値:
        List[Session]: セッションのリスト
    """
    if game not in GAME_FEATURES:
        raise ValueError(f"未知のゲームです: {game}")
    if n_sessions < 1:
        raise ValueError(f"n_sessionsは1以上が必要です: {n_sessions}")
    if n_windows < 2:
        raise ValueError(f"n_windowsは2以上が必要です: {n_windows}")

    rng = np.random.default_rng(seed)
    names = GAME_FEATURES[game]
    truth_name, center, scale = GROUND_TRUTH[game]
    truth_index = names.index(truth_name)

    sessions = []
    for s in range(n_sessions):
        traces = _synthetic_features(game, rng, n_windows)
        z = (traces[:, truth_index] - center) / scale
        deltas = 0.004 * z + rng.normal(0.0, 0.0003, size=n_windows)
        deltas[0] = 0.0
        path = np.cumsum(deltas)
        # 軌跡が[0, 1]の中央に来るよう開始値を決める
        arousal = np.clip(0.5 - (path.max() + path.min()) / 2.0 + path, 0.0, 1.0)
        session_id = f"{game}-{s:04d}"
        sessions.append([
            FeatureWindow(session_id, w, tuple(float(v) for v in traces[w]), float(arousal[w]))
            for w in range(n_windows)
        ])
    return sessions


def _synthetic_features(game: str, rng: np.random.Generator, n_windows: int) -> np.ndarray:
    """環境が出す値域に合わせたゲームごとの特徴量トレース"""
    rows = np.zeros((n_windows, 5))
    if game == "pirates":
        pace = rng.uniform(0.0, 2.5)
        x, coins, powerups, deaths = 3.0, 0, 0, 0
        for w in range(n_windows):
            x = float(np.clip(x + pace * 3.0 + rng.normal(0.0, 2.0), 2.0, 198.0))
            coins = max(coins, min(38, int(x / 5.3 * rng.uniform(0.3, 1.0))))
            powerups = max(powerups, min(4, int(x / 50.0)))
            deaths += int(rng.random() < 0.08)
            rows[w] = (coins * 10 + powerups * 20, 1.0, x, coins, deaths)
    elif game == "heist":
        drive = rng.uniform(0.0, 1.0)
        kills, visited = 0, 1
        for w in range(n_windows):
            moved = float(np.clip(rng.normal(1.0 + 3.0 * drive, 0.8), 0.0, 5.0))
            visited = min(144, visited + int(rng.poisson(drive * 1.2)))
            kills = min(25, kills + int(rng.random() < 0.15 * drive))
            ammo = float(rng.uniform(0.0, 11.0))
            health = float(rng.choice([100.0, 90.0, 80.0, 60.0]))
            rows[w] = (kills, ammo, health, visited, moved)
    else:
        skill = rng.uniform(0.0, 1.0)
        passed = 0
        for w in range(n_windows):
            speed = float(np.clip(rng.normal(4.0 + 14.0 * skill, 2.5), 0.0, 20.0))
            passed = min(24, passed + int(rng.random() < speed / 25.0))
            angle = float(np.clip(rng.normal(0.0, 1.2 * (1.0 - skill) + 0.1), -np.pi, np.pi))
            off_track = float(rng.random() < 0.3 * (1.0 - skill))
            rows[w] = (speed, passed, angle, off_track, speed)
    return rows


def save_corpus_csv(sessions: Sequence[Session], path: str) -> None:
    """コーパスをCSV（session_id, window_index, arousal, p_0...）で保存"""
    n = len(sessions[0][0].features)
    records = [
        [w.session_id, w.window_index, w.mean_arousal, *w.features]
        for session in sessions for w in session
    ]
    frame = pd.DataFrame(records, columns=CSV_FIXED_COLUMNS + [f"p_{i}" for i in range(n)])
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame.to_csv(path, index=False)


def load_corpus_csv(path: str) -> List[Session]:
    """CSVからセッション列を読み込む（覚醒度は[0, 1]であれば任意）"""
    try:
        frame = pd.read_csv(path, float_precision="round_trip", dtype={"session_id": str})
    except FileNotFoundError:
        raise CorpusFormatError(f"コーパスCSVが見つかりません: path={path}")

    columns = list(frame.columns)
    feature_columns = columns[len(CSV_FIXED_COLUMNS):]
    expected = [f"p_{i}" for i in range(len(feature_columns))]
    if columns[:len(CSV_FIXED_COLUMNS)] != CSV_FIXED_COLUMNS or feature_columns != expected or not feature_columns:
        raise CorpusFormatError(f"コーパスCSVのヘッダーが不正です: path={path}, columns={columns}")
    if frame[feature_columns].isna().any().any():
        raise CorpusFormatError(f"コーパスCSVに欠損値があります: path={path}")
    if ((frame["arousal"] < 0.0) | (frame["arousal"] > 1.0)).any():
        raise CorpusFormatError(f"覚醒度は[0, 1]の範囲が必要です: path={path}")

    sessions = []
    for session_id, group in frame.groupby("session_id", sort=True):
        group = group.sort_values("window_index")
        sessions.append([
            FeatureWindow(str(session_id), int(row.window_index),
                          tuple(float(row[c]) for c in feature_columns), float(row.arousal))
            for _, row in group.iterrows()
        ])
    return sessions


def load_corpus(path: str, game: str, config: Optional[AffectModelConfig] = None) -> TransitionCorpus:
    sessions = load_corpus_csv(path)
    size = len(sessions[0][0].features)
    if game in GAME_FEATURES and size != len(GAME_FEATURES[game]):
        raise CorpusFormatError(
            f"コーパスのP長がゲームと一致しません: game={game}, 期待={len(GAME_FEATURES[game])}, 実際={size}"
        )
    corpus = build_corpus(sessions, config or AffectModelConfig(), game=game)
    print(f"コーパスを読み込みました: {path} (遷移数={len(corpus)}, 除外した安定遷移={corpus.discarded})")
    return corpus


def corpus_stats(sessions: Sequence[Session], config: Optional[AffectModelConfig] = None) -> Dict[str, object]:
    """corpus stats サブコマンド用の集計"""
    corpus = build_corpus(sessions, config or AffectModelConfig())
    increases = int(corpus.labels.sum())
    return {
        "sessions": len(sessions),
        "windows": sum(len(s) for s in sessions),
        "transitions": len(corpus),
        "increase": increases,
        "decrease": len(corpus) - increases,
        "stable_discarded": corpus.discarded,
        "feature_mean": corpus.config.feature_mean,
        "feature_std": corpus.config.feature_std,
    }


if __name__ == "__main__":
    # 合成コーパスの生成と1回の問い合わせ
    sessions = generate_synthetic_corpus("solid", seed=1, n_sessions=20)
    corpus = build_corpus(sessions, AffectModelConfig(), game="solid")
    slow = (2.0, 3.0, 0.5, 0.0, 2.0)
    fast = (18.0, 5.0, 0.1, 0.0, 18.0)
    print(f"遷移数: {len(corpus)}")
    print(f"低速→高速: {corpus.query(slow, fast):.3f}")
    print(f"高速→低速: {corpus.query(fast, slow):.3f}")
