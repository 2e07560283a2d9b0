from typing import Dict, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

# 各ゲームの1tickあたりR_Bの理論上の最小・最大値（各報酬関数の定数から導出）
#   Pirates: 死亡のみ -5 / パワーアップ+右移動 20 + 0.1
#   Heist:   敵から真逆を向いて何もしない -1 / キル+新エリア+正対 20 + 1 + 1
#   Solid:   停止 0 / ウェイポイント通過+全速で正対 1 + 1
BEHAVIOUR_BOUNDS: Dict[str, Tuple[float, float]] = {
    "pirates": (-5.0, 20.1),
    "heist": (-1.0, 22.0),
    "solid": (0.0, 2.0),
}


class BlendConfig(BaseModel):
    """ブレンドのλと、行動報酬の正規化に使う上下限"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(0.0, ge=0.0, le=1.0, alias="lambda")
    behaviour_bounds: Tuple[float, float] = (0.0, 1.0)

    @model_validator(mode="after")
    def _check_bounds(self):
        low, high = self.behaviour_bounds
        if not low < high:
            raise ValueError(f"behaviour_boundsは min < max が必要です: {self.behaviour_bounds}")
        return self

    @classmethod
    def for_game(cls, game: str, lam: float) -> "BlendConfig":
        # 未登録のゲーム（基底クラスなど）は恒等的な[0, 1]を使う
        return cls(lam=lam, behaviour_bounds=BEHAVIOUR_BOUNDS.get(game, (0.0, 1.0)))


def normalize_behaviour(r_b: float, bounds: Tuple[float, float]) -> float:
    """
    行動報酬を最小最大の線形変換で[0, 1]に写す

    境界外の値（浮動小数誤差など）はエラーにせずクランプする。

    引数:
        r_b: 1tickの行動報酬
        bounds: (最小, 最大)

    戻り値:
        float: [0, 1]の正規化済み報酬
    """
    low, high = bounds
    value = (r_b - low) / (high - low)
    return min(1.0, max(0.0, value))


def blend(r_b: float, r_a: float, config: BlendConfig) -> float:
    """R_t = (1 - λ)·n(R_B) + λ·R_A"""
    lam = config.lam
    # 両端のλでは片側の項をそのまま返し、もう片方の値に一切依存させない
    if lam == 0.0:
        return normalize_behaviour(r_b, config.behaviour_bounds)
    if lam == 1.0:
        return r_a
    return (1.0 - lam) * normalize_behaviour(r_b, config.behaviour_bounds) + lam * r_a
