import functools
import os
import sys
import time
from typing import Any, Dict, Optional

import click
import numpy as np

from affect_model import (
    CorpusBuildError,
    CorpusFormatError,
    corpus_stats,
    generate_synthetic_corpus,
    load_corpus_csv,
    save_corpus_csv,
)
from agents import PPOAgent, RandomAgent, UpdateAbortedError, evaluate, load_checkpoint, save_checkpoint, train
from config import (
    CORPUS_DIR,
    GAMES,
    HEALTH_PORT,
    HOST,
    OUTPUT_DIR,
    PORT,
    ConfigError,
    RunConfig,
    load_config_file,
    merge_overrides,
    validate_config,
    write_snapshot,
)
from env_core import ActionValidationError, EpisodeLifecycleError, derive_rng
from env_factory import load_env_corpus, make_env
from env_pirates import LevelFormatError
from eval_harness import (
    CONDITIONS,
    condition_from_slug,
    emit_report,
    format_table,
    rows_from_dir,
    run_matrix,
    save_raw_runs,
    summarize,
)

DOMAIN_ERRORS = (
    ConfigError,
    CorpusFormatError,
    CorpusBuildError,
    LevelFormatError,
    UpdateAbortedError,
    ActionValidationError,
    EpisodeLifecycleError,
    OSError,
)


def handle_errors(func):
    """既知のエラーを1行の診断にして終了コード1で終わる"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DOMAIN_ERRORS as e:
            click.echo(f"エラー: {e}", err=True)
            sys.exit(1)

    return wrapper


def default_corpus_path(game: str) -> str:
    return os.path.join(CORPUS_DIR, f"{game}_corpus.csv")


def build_run_config(config_path: Optional[str], env: Dict[str, Any], train: Dict[str, Any],
                     run: Dict[str, Any]) -> RunConfig:
    """設定ファイル（任意）にCLIフラグを上書きしてRunConfigを作る"""
    base = load_config_file(config_path)
    merged = merge_overrides(base, {"env": env, "train": train, **run})
    return validate_config(RunConfig, merged, source=config_path or "引数")


def condition_for_lambda(lam: float) -> str:
    for name, value in CONDITIONS.items():
        if value == lam:
            return name
    return f"PPO λ={lam}"


@click.group()
@click.option("--quiet", is_flag=True, help="進捗バーを表示しない")
@click.pass_context
def cli(ctx, quiet):
    """感情ベースの強化学習フレームワーク（Pirates / Heist / Solid Rally）"""
    ctx.obj = {"progress": not quiet}


@cli.group()
def corpus():
    """合成コーパスの生成と集計"""


@corpus.command("gen")
@click.option("--game", type=click.Choice(GAMES), required=True)
@click.option("--sessions", type=int, default=50, show_default=True)
@click.option("--windows", type=int, default=40, show_default=True, help="セッションあたりの3秒窓の数")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="出力CSV")
@handle_errors
def corpus_gen(game, sessions, windows, seed, out_path):
    """合成の覚醒度トレースをCSVに書き出す"""
    try:
        data = generate_synthetic_corpus(game, seed, sessions, windows)
    except ValueError as e:
        raise CorpusBuildError(str(e)) from e
    path = out_path or default_corpus_path(game)
    save_corpus_csv(data, path)
    click.echo(f"コーパスを書き出しました: {path} (セッション数={sessions}, 窓数={sessions * windows})")


@corpus.command("stats")
@click.argument("path", type=click.Path(dir_okay=False))
@handle_errors
def corpus_stats_command(path):
    """コーパスCSVの件数・ラベルの偏り・特徴量の統計"""
    summary = corpus_stats(load_corpus_csv(path))
    for key in ("sessions", "windows", "transitions", "increase", "decrease", "stable_discarded"):
        click.echo(f"{key}: {summary[key]}")
    mean = np.asarray(summary["feature_mean"])
    std = np.asarray(summary["feature_std"])
    for i, (m, s) in enumerate(zip(mean, std)):
        click.echo(f"p_{i}: mean={m:.4f}, std={s:.4f}")


def env_options(func):
    options = [
        click.option("--game", type=click.Choice(GAMES), default=None),
        click.option("--lambda", "lam", type=click.FloatRange(0.0, 1.0), default=None, help="ブレンドのλ"),
        click.option("--corpus", "corpus_path", type=click.Path(dir_okay=False), default=None),
        click.option("--tps", "ticks_per_second", type=int, default=None, help="1秒あたりのtick数"),
        click.option("--layout", type=click.Choice(["fixed", "generated"]), default=None),
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON設定"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def env_overrides(game, lam, corpus_path, ticks_per_second, layout) -> Dict[str, Any]:
    return {"game": game, "lambda": lam, "corpus_path": corpus_path,
            "ticks_per_second": ticks_per_second, "layout": layout}


@cli.command("train")
@env_options
@click.option("--steps", type=int, default=None, help="学習の総ステップ数")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def train_command(ctx, game, lam, corpus_path, ticks_per_second, layout, config_path, steps, seed, out_dir):
    """PPOで学習し、チェックポイントと学習ログを書き出す"""
    config = build_run_config(
        config_path,
        env_overrides(game, lam, corpus_path, ticks_per_second, layout),
        {"total_steps": steps, "seed": seed},
        {"seed": seed, "output_dir": out_dir},
    )
    env = make_env(config.env, track_affect=False)
    write_snapshot(config, config.output_dir)
    log_path = os.path.join(config.output_dir, "train_log.csv")
    policy, rows = train(env, config.train, progress=ctx.obj["progress"], log_path=log_path)
    save_checkpoint(os.path.join(config.output_dir, "checkpoint.pt"), policy, config.env.game, config.train)
    if rows:
        last = rows[-1]
        click.echo(f"学習が完了しました: steps={last['steps']}, 平均R_t={last['mean_reward']:.4f}")
    click.echo(f"学習ログ: {log_path}")


@cli.command("eval")
@env_options
@click.option("--agent", type=click.Choice(["random", "ppo"]), default="random", show_default=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--runs", type=int, default=None, help="評価の実行回数")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def eval_command(ctx, game, lam, corpus_path, ticks_per_second, layout, config_path, agent, checkpoint,
                 runs, seed, out_dir):
    """エージェントを評価し、レポート行を表示してCSVに書き出す"""
    config = build_run_config(
        config_path,
        env_overrides(game, lam, corpus_path, ticks_per_second, layout),
        {},
        {"seed": seed, "runs": runs, "output_dir": out_dir},
    )
    env = make_env(config.env, track_affect=True)
    if agent == "random":
        condition = "Random"
        actor = RandomAgent(env.action_spec)
    else:
        if not checkpoint:
            raise ConfigError("--agent ppo には --checkpoint が必要です")
        policy, _ = load_checkpoint(checkpoint, game=config.env.game)
        condition = condition_for_lambda(config.env.lambda_)
        actor = PPOAgent(policy, env.n_grid_ids)

    write_snapshot(config.model_copy(update={"condition": condition}), config.output_dir)
    records = evaluate(actor, env, seeds=config.seeds, progress=ctx.obj["progress"])
    row = summarize(config.env.game, condition, records)
    save_raw_runs(os.path.join(config.output_dir, "runs.csv"), config.env.game, condition, records)
    csv_path, _ = emit_report([row], config.output_dir)
    click.echo(format_table([row]))
    click.echo(f"レポート: {csv_path}")


@cli.command("table")
@click.option("--games", default=",".join(GAMES), show_default=True, help="カンマ区切り")
@click.option("--conditions", default="random,behaviour,blended,arousal", show_default=True, help="カンマ区切り")
@click.option("--steps", type=int, default=None)
@click.option("--runs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--corpus-dir", type=click.Path(file_okay=False), default=CORPUS_DIR, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--from-dir", type=click.Path(file_okay=False, exists=True), default=None,
              help="既存の実行ディレクトリのrunごとの記録から表を再計算する")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@handle_errors
def table_command(ctx, games, conditions, steps, runs, seed, corpus_dir, out_dir, from_dir, config_path):
    """ゲーム×条件の全組み合わせを実行して表を出す"""
    if from_dir:
        click.echo(format_table(rows_from_dir(from_dir)))
        return
    game_list = [g.strip() for g in games.split(",") if g.strip()]
    unknown = [g for g in game_list if g not in GAMES]
    if unknown:
        raise ConfigError(f"不明なゲームです: {unknown}")
    condition_list = [condition_from_slug(c.strip()) for c in conditions.split(",") if c.strip()]

    config = build_run_config(
        config_path,
        {"game": game_list[0]},
        {"total_steps": steps, "seed": seed},
        {"seed": seed, "runs": runs, "output_dir": out_dir},
    )
    corpora = {}
    for game in game_list:
        path = os.path.join(corpus_dir, f"{game}_corpus.csv")
        if os.path.exists(path):
            corpora[game] = load_env_corpus(config.env.model_copy(update={"game": game, "corpus_path": path}))
        else:
            click.echo(f"警告: コーパスが見つかりません: {path}")
    rows = run_matrix(config, corpora, game_list, condition_list, progress=ctx.obj["progress"])
    click.echo(format_table(rows))


@cli.command("serve")
@env_options
@click.option("--host", default=HOST, show_default=True)
@click.option("--port", type=int, default=PORT, show_default=True)
@click.option("--health-port", type=int, default=HEALTH_PORT, show_default=True, help="0で無効")
@handle_errors
def serve_command(game, lam, corpus_path, ticks_per_second, layout, config_path, host, port, health_port):
    """プロトコルサーバーを起動する（接続ごとに1環境）"""
    from keep_alive import keep_alive
    from net_protocol import serve

    config = build_run_config(config_path, env_overrides(game, lam, corpus_path, ticks_per_second, layout), {}, {})
    corpus_data = load_env_corpus(config.env)

    def env_factory():
        return make_env(config.env, corpus=corpus_data, track_affect=True)

    # 待ち受け前に1度作って設定の誤りをここで終了コード1にする
    env_factory()
    server = serve(host, port, env_factory)
    if health_port:
        keep_alive(server, health_port)
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        print("サーバーを停止します")
    finally:
        server.shutdown()
        server.server_close()


@cli.command("play-random")
@env_options
@click.option("--seed", type=int, default=0, show_default=True)
@handle_errors
def play_random_command(game, lam, corpus_path, ticks_per_second, layout, config_path, seed):
    """ランダム行動で1エピソードを実行し、tickごとの値を表示する"""
    config = build_run_config(config_path, env_overrides(game, lam, corpus_path, ticks_per_second, layout), {}, {})
    env = make_env(config.env, track_affect=True)
    env.reset(seed)
    rng = derive_rng(seed, "agent")
    click.echo("tick\tscore\tR_B\tAff_t\tR_t")
    result = None
    while result is None or not result.done:
        result = env.step(env.sample_action(rng))
        click.echo(f"{result.tick}\t{result.score:g}\t{result.behaviour_reward:.4f}\t"
                   f"{result.affect_signal:.4f}\t{result.total_reward:.4f}")
    click.echo(f"終了: tick={result.tick}, score={result.score:g}, 正規化スコア={env.normalized_score(result.score):.3f}")


if __name__ == "__main__":
    cli()
