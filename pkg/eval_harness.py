import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from affect_model import TransitionCorpus
from agents import EpisodeRecord, PPOAgent, RandomAgent, evaluate, save_checkpoint, train
from config import GAMES, ConfigError, RunConfig, write_snapshot
from env_factory import make_env

# 条件名 → λ（Randomは学習しない）
CONDITIONS: Dict[str, Optional[float]] = {
    "Random": None,
    "Max Behaviour": 0.0,
    "Blended": 0.5,
    "Max Arousal": 1.0,
}
CONDITION_SLUGS = {
    "random": "Random",
    "behaviour": "Max Behaviour",
    "blended": "Blended",
    "arousal": "Max Arousal",
}
GAME_TITLES = {"pirates": "Pirates", "heist": "Heist", "solid": "Solid Rally"}

REPORT_COLUMNS = ["game", "condition", "final_re_mean", "final_re_ci95", "mean_ra_mean", "mean_ra_ci95", "n_runs"]
RAW_COLUMNS = ["game", "condition", "run", "seed", "final_score", "normalized_score", "mean_affect",
               "affect_values", "ticks"]


@dataclass
class ReportRow:
    game: str
    condition: str
    final_re_mean: float
    final_re_ci95: float
    mean_ra_mean: float
    mean_ra_ci95: float
    n_runs: int


def condition_from_slug(name: str) -> str:
    if name in CONDITIONS:
        return name
    if name in CONDITION_SLUGS:
        return CONDITION_SLUGS[name]
    raise ConfigError(f"不明な条件です: {name} (選択肢: {', '.join(CONDITION_SLUGS)})")


def slug_for(condition: str) -> str:
    return next(slug for slug, title in CONDITION_SLUGS.items() if title == condition)


def mean_ci95(values: Sequence[float]) -> Tuple[float, float]:
    """
    平均とt分布による95%信頼区間の半幅

    NaN（感情信号が一度も出なかったrunなど）は除いて計算する。

    引数:
        values: runごとの値

    戻り値:
        Tuple[float, float]: (平均, 半幅)。値が1つなら半幅0、値がなければ両方NaN
    """
    data = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    n = len(data)
    if n == 0:
        return float("nan"), float("nan")
    mean = float(data.mean())
    if n < 2:
        return mean, 0.0
    half = float(stats.t.ppf(0.975, n - 1) * data.std(ddof=1) / math.sqrt(n))
    return mean, half


def summarize(game: str, condition: str, records: Sequence[EpisodeRecord]) -> ReportRow:
    re_mean, re_ci = mean_ci95([r.normalized_score for r in records])
    ra_mean, ra_ci = mean_ci95([r.mean_affect for r in records])
    return ReportRow(game, condition, re_mean, re_ci, ra_mean, ra_ci, len(records))


def records_to_frame(game: str, condition: str, records: Sequence[EpisodeRecord]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "game": game,
            "condition": condition,
            "run": i,
            "seed": r.seed,
            "final_score": r.final_score,
            "normalized_score": r.normalized_score,
            "mean_affect": r.mean_affect,
            "affect_values": ";".join(repr(v) for v in r.affect_values),
            "ticks": r.ticks,
        }
        for i, r in enumerate(records)
    ], columns=RAW_COLUMNS)


def save_raw_runs(path: str, game: str, condition: str, records: Sequence[EpisodeRecord]) -> None:
    try:
        records_to_frame(game, condition, records).to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"runごとの記録を書き込めません: path={path}: {e}") from e


def load_raw_runs(path: str) -> Tuple[str, str, List[EpisodeRecord]]:
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=True, dtype={"affect_values": str})
    if list(frame.columns) != RAW_COLUMNS:
        raise ConfigError(f"runごとの記録のヘッダーが不正です: path={path}")
    records = []
    for row in frame.itertuples(index=False):
        text = row.affect_values if isinstance(row.affect_values, str) else ""
        values = tuple(float(v) for v in text.split(";") if v)
        records.append(EpisodeRecord(int(row.seed), float(row.final_score), float(row.normalized_score),
                                     float(row.mean_affect), values, int(row.ticks)))
    return str(frame["game"].iloc[0]), str(frame["condition"].iloc[0]), records


def run_condition(game: str, condition: str, corpus: Optional[TransitionCorpus], config: RunConfig,
                  out_dir: Optional[str] = None, progress: bool = True) -> Tuple[ReportRow, List[EpisodeRecord]]:
    """
    1つのゲーム×条件を学習（Random以外）して評価し、レポートの1行を作る

    学習は感情信号を計測しない環境で行い（λ=0ならコーパスに問い合わせない）、
    評価はコーパスがあれば常に感情信号を計測する。

    引数:
        game: ゲームID
        condition: "Random" / "Max Behaviour" / "Blended" / "Max Arousal"
        corpus: 読み込み済みコーパス（λ > 0 の条件では必須）
        config: 実行設定（学習設定・評価シード）
        out_dir: チェックポイント・学習ログ・runごとの記録の出力先
        progress: 進捗表示

    戻り値:
        Tuple[ReportRow, List[EpisodeRecord]]: レポート行とrunごとの記録
    """
    lam = CONDITIONS[condition]
    if lam and corpus is None:
        raise ConfigError(f"条件 {condition} (λ={lam}) にはコーパスが必要です: game={game}")
    env_config = config.env.model_copy(update={"game": game, "lambda_": lam or 0.0})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    eval_env = make_env(env_config, corpus=corpus, track_affect=True)
    if lam is None:
        agent = RandomAgent(eval_env.action_spec)
    else:
        train_env = make_env(env_config, corpus=corpus, track_affect=False)
        log_path = os.path.join(out_dir, "train_log.csv") if out_dir else None
        policy, _ = train(train_env, config.train, progress=progress, log_path=log_path)
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "checkpoint.pt"), policy, game, config.train)
        agent = PPOAgent(policy, eval_env.n_grid_ids)

    records = evaluate(agent, eval_env, seeds=config.seeds, progress=progress)
    if out_dir:
        save_raw_runs(os.path.join(out_dir, "runs.csv"), game, condition, records)
    return summarize(game, condition, records), records


def run_matrix(config: RunConfig, corpora: Dict[str, Optional[TransitionCorpus]],
               games: Sequence[str] = GAMES, conditions: Sequence[str] = tuple(CONDITIONS),
               progress: bool = True) -> List[ReportRow]:
    """ゲーム×条件の全組み合わせを実行し、出力先にレポートと設定を書き出す"""
    write_snapshot(config, config.output_dir)
    rows = []
    for game in games:
        for condition in conditions:
            if CONDITIONS[condition] and corpora.get(game) is None:
                tqdm.write(f"警告: コーパスがないためスキップします: game={game}, condition={condition}")
                continue
            out_dir = os.path.join(config.output_dir, game, slug_for(condition))
            row, _ = run_condition(game, condition, corpora.get(game), config, out_dir, progress)
            rows.append(row)
    emit_report(rows, config.output_dir)
    return rows


def rows_from_dir(directory: str) -> List[ReportRow]:
    """出力ディレクトリ内の runs.csv からレポートを再計算する"""
    rows = []
    for game in GAMES:
        for condition in CONDITIONS:
            path = os.path.join(directory, game, slug_for(condition), "runs.csv")
            if os.path.exists(path):
                _, _, records = load_raw_runs(path)
                rows.append(summarize(game, condition, records))
    if not rows:
        raise ConfigError(f"runs.csv が見つかりません: dir={directory}")
    return rows


def _format_cell(mean: float, ci: float) -> str:
    if math.isnan(mean):
        return "-"
    return f"{mean:.3f} ± {ci:.3f}"


def format_table(rows: Sequence[ReportRow]) -> str:
    """ゲームごとに条件を並べた表（R_E と R̄_A、平均 ± 95%CI）"""
    frame = pd.DataFrame([
        {
            "Game": GAME_TITLES.get(r.game, r.game),
            "Agent": r.condition,
            "R_E": _format_cell(r.final_re_mean, r.final_re_ci95),
            "mean R_A": _format_cell(r.mean_ra_mean, r.mean_ra_ci95),
            "runs": r.n_runs,
        }
        for r in rows
    ])
    with pd.option_context("display.max_rows", None, "display.max_columns", None, "display.width", None):
        return frame.to_string(index=False)


def emit_report(rows: Sequence[ReportRow], directory: str, name: str = "report") -> Tuple[str, str]:
    """
    レポートをCSVと整形済みテキストで書き出す

    引数:
        rows: レポート行（1行以上）
        directory: 出力先
        name: ファイル名の拡張子前の部分

    戻り値:
        Tuple[str, str]: (CSVのパス, テキストのパス)
    """
    if not rows:
        raise ValueError("レポートの行がありません")
    csv_path = os.path.join(directory, f"{name}.csv")
    txt_path = os.path.join(directory, f"{name}.txt")
    try:
        os.makedirs(directory, exist_ok=True)
        pd.DataFrame([asdict(r) for r in rows], columns=REPORT_COLUMNS).to_csv(csv_path, index=False)
        with open(txt_path, "w", encoding="utf-8") as f:
            f.write(format_table(rows) + "\n")
    except OSError as e:
        raise OSError(f"レポートを書き込めません: dir={directory}: {e}") from e
    return csv_path, txt_path


def parse_report(path: str) -> List[ReportRow]:
    """
    emit_report が書いたCSVを読み戻す

    感情信号がない条件の mean_ra_* は空欄で書かれ、NaNとして戻る。

    引数:
        path: report.csv のパス

    戻り値:
        List[ReportRow]: 書き出したときと同じ行
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != REPORT_COLUMNS:
        raise ConfigError(f"レポートCSVのヘッダーが不正です: path={path}")
    return [
        ReportRow(str(r.game), str(r.condition), float(r.final_re_mean), float(r.final_re_ci95),
                  float(r.mean_ra_mean), float(r.mean_ra_ci95), int(r.n_runs))
        for r in frame.itertuples(index=False)
    ]
