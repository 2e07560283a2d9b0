import json
import os
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

load_dotenv()

OUTPUT_DIR = os.getenv("AFFECTIVELY_OUTPUT_DIR", "runs")
CORPUS_DIR = os.getenv("AFFECTIVELY_CORPUS_DIR", "corpora")
HOST = os.getenv("AFFECTIVELY_HOST", "127.0.0.1")
PORT = int(os.getenv("AFFECTIVELY_PORT", "7777"))
HEALTH_PORT = int(os.getenv("AFFECTIVELY_HEALTH_PORT", "10000"))

GAMES = ("pirates", "heist", "solid")
GameId = Literal["pirates", "heist", "solid"]


class ConfigError(ValueError):
    """設定ファイル・CLI引数の検証エラー"""


class AffectSettings(BaseModel):
    """EnvConfig.affect（AffectModelConfigに渡す部分）"""

    model_config = ConfigDict(extra="forbid")

    k: int = Field(5, ge=1)
    stable_epsilon: float = Field(1e-6, ge=0.0)
    distance_delta: float = Field(1e-6, gt=0.0)
    mode: Literal["window", "hold_last"] = "window"


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    game: GameId
    ticks_per_second: int = Field(10, ge=1)
    corpus_path: Optional[str] = None
    lambda_: float = Field(0.0, ge=0.0, le=1.0, alias="lambda")
    layout: Literal["fixed", "generated"] = "fixed"
    layout_path: Optional[str] = None
    affect: AffectSettings = Field(default_factory=AffectSettings)
    # 報酬関数の定数の上書き（PiratesRewardParams などのフィールド名）
    reward: Dict[str, float] = Field(default_factory=dict)
    # 直近の Aff_t を観測のプロパティベクトル末尾に加える
    affect_in_observation: bool = False


class TrainConfig(BaseModel):
    """PPOのハイパーパラメータ（一般的な既定値）"""

    model_config = ConfigDict(extra="forbid")

    total_steps: int = Field(100_000, gt=0)
    clip_ratio: float = Field(0.2, gt=0.0, lt=1.0)
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    gae_lambda: float = Field(0.95, gt=0.0, le=1.0)
    learning_rate: float = Field(3e-4, gt=0.0)
    rollout_length: int = Field(2048, gt=0)
    epochs: int = Field(10, gt=0)
    minibatch_size: int = Field(64, gt=0)
    entropy_coef: float = Field(0.01, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    max_grad_norm: float = Field(0.5, gt=0.0)
    hidden_size: int = Field(64, gt=0)
    seed: int = 0


class RunConfig(BaseModel):
    """1回の実行（train / eval / table）の完全な設定。出力先に config.json として保存する"""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    env: EnvConfig
    train: TrainConfig = Field(default_factory=TrainConfig)
    seed: int = 0
    runs: int = Field(30, gt=0)
    # 評価runごとのシード。未指定なら seed, seed+1, ... で埋める
    seeds: Optional[List[int]] = None
    output_dir: str = OUTPUT_DIR
    condition: Optional[str] = None

    @model_validator(mode="after")
    def _resolve_seeds(self):
        if self.seeds is None:
            self.seeds = [self.seed + i for i in range(self.runs)]
        elif len(self.seeds) != self.runs:
            raise ValueError(f"seeds の数が runs と一致しません: seeds={len(self.seeds)}, runs={self.runs}")
        return self


M = TypeVar("M", bound=BaseModel)


def validate_config(model: Type[M], data: Dict[str, Any], source: str = "引数") -> M:
    """pydanticの検証エラーをConfigErrorに変換する"""
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"設定が不正です ({source}): {e}") from e


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """JSON設定ファイルを辞書で読む（未指定なら空）"""
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"設定ファイルを開けません: path={path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定ファイルのJSONが不正です: path={path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"設定ファイルの最上位はオブジェクトが必要です: path={path}")
    return data


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """CLIフラグ（Noneは未指定）で設定ファイルの値を上書きする。入れ子の辞書は再帰的にマージ"""
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = merged.get(key)
            merged[key] = merge_overrides(current if isinstance(current, dict) else {}, value)
        else:
            merged[key] = value
    return merged


def write_snapshot(config: RunConfig, directory: str) -> str:
    """実行ディレクトリに解決済み設定を保存する"""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.model_dump_json(indent=2, by_alias=True))
    return path


def read_snapshot(directory: str) -> RunConfig:
    path = os.path.join(directory, "config.json")
    return validate_config(RunConfig, load_config_file(path), source=path)
