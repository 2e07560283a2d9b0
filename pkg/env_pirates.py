import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from affect_model import GAME_FEATURES
from env_core import Action, ActionSpec, GameEnv, Observation

LEVEL_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "levels", "pirates_level.txt")

# タイルマップの凡例（1文字1タイル、上の行ほど高い位置）
#   . 空白  # 障害物  B 壊せるブロック  o コイン  P パワーアップ
#   E 敵の初期位置  C チェックポイント  X ゴール  S プレイヤー開始位置
LEGEND = set(".#BoPECXS")

# グリッドID（大きいほど優先度が高い。中央は常にプレイヤー）
EMPTY, OBSTACLE, BREAKABLE, COLLECTIBLE, ENEMY, PLAYER = range(6)
VIEW_RADIUS = 5

# 物理定数（タイル単位・秒）
GRAVITY = 30.0
JUMP_SPEED = 12.0
RUN_SPEED = 6.0
MAX_FALL_SPEED = 9.5
ENEMY_SPEED = 2.0
PLAYER_W, PLAYER_H = 0.8, 0.9
ENEMY_W, ENEMY_H = 0.9, 0.9
POWER_SECONDS = 10.0
EPS = 1e-9


class LevelFormatError(ValueError):
    """レベル・マップ・トラックのファイル形式が不正"""


@dataclass(frozen=True)
class PiratesRewardParams:
    move_right_bonus: float = 0.1
    death_penalty: float = 5.0
    coin_value: float = 10.0
    powerup_value: float = 20.0
    max_score: float = 460.0


@dataclass
class PiratesLevel:
    width: int
    height: int
    solid: np.ndarray  # [x, y] 障害物のみ（壊せるブロックは別管理）
    breakables: Dict[str, Tuple[int, int]]
    coins: Dict[str, Tuple[int, int]]
    powerups: Dict[str, Tuple[int, int]]
    enemy_spawns: Dict[str, Tuple[int, int]]
    checkpoints: List[Tuple[int, int]]
    exits: List[Tuple[int, int]]
    start: Tuple[int, int]
    base_ids: np.ndarray = field(init=False)  # 観測用の静的IDマップ（周囲を障害物で埋めた[y, x]）
    breakable_at: Dict[Tuple[int, int], str] = field(init=False)
    collectible_at: Dict[Tuple[int, int], str] = field(init=False)

    def __post_init__(self):
        self.breakable_at = {pos: bid for bid, pos in self.breakables.items()}
        self.collectible_at = {pos: cid for cid, pos in list(self.coins.items()) + list(self.powerups.items())}
        pad = VIEW_RADIUS
        ids = np.full((self.height + 2 * pad, self.width + 2 * pad), OBSTACLE, dtype=np.int64)
        inner = np.where(self.solid.T, OBSTACLE, EMPTY)
        for x, y in self.breakables.values():
            inner[y, x] = BREAKABLE
        for x, y in list(self.coins.values()) + list(self.powerups.values()):
            inner[y, x] = COLLECTIBLE
        ids[pad:pad + self.height, pad:pad + self.width] = inner
        self.base_ids = ids


@dataclass(frozen=True)
class PiratesState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    facing: int = 1
    grounded: bool = False
    health: int = 1
    powered_up: bool = False
    power_ticks: int = 0
    last_checkpoint: Tuple[int, int] = (0, 0)
    collected: FrozenSet[str] = frozenset()
    enemies: Tuple[Tuple[str, float, int, int], ...] = ()  # (id, x, y, 向き)
    score: float = 0.0
    coins: int = 0
    powerups: int = 0
    deaths: int = 0
    moved_right: bool = False
    died: bool = False
    reached_exit: bool = False
    tick: int = 0
    max_ticks: int = 1200


def parse_level(text: str) -> PiratesLevel:
    """テキストのタイルマップをPiratesLevelに変換"""
    rows = [line.rstrip("\n") for line in text.splitlines() if line.strip()]
    if not rows:
        raise LevelFormatError("レベルが空です")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise LevelFormatError("レベルの各行の長さが揃っていません")
    height = len(rows)

    solid = np.zeros((width, height), dtype=bool)
    breakables, coins, powerups, enemies = {}, {}, {}, {}
    checkpoints, exits, start = [], [], None
    for row_index, line in enumerate(rows):
        y = height - 1 - row_index
        for x, ch in enumerate(line):
            if ch not in LEGEND:
                raise LevelFormatError(f"未知のタイル文字です: {ch!r} (x={x}, y={y})")
            if ch == "#":
                solid[x, y] = True
            elif ch == "B":
                breakables[f"b{len(breakables)}"] = (x, y)
            elif ch == "o":
                coins[f"c{len(coins)}"] = (x, y)
            elif ch == "P":
                powerups[f"p{len(powerups)}"] = (x, y)
            elif ch == "E":
                enemies[f"e{len(enemies)}"] = (x, y)
            elif ch == "C":
                checkpoints.append((x, y))
            elif ch == "X":
                exits.append((x, y))
            elif ch == "S":
                start = (x, y)
    if start is None:
        raise LevelFormatError("開始位置 S がありません")
    if not exits:
        raise LevelFormatError("ゴール X がありません")
    return PiratesLevel(width, height, solid, breakables, coins, powerups, enemies, checkpoints, exits, start)


def load_level(path: Optional[str] = None) -> PiratesLevel:
    with open(path or LEVEL_PATH, "r", encoding="utf-8") as f:
        return parse_level(f.read())


def generate_level(rng: np.random.Generator, width: int = 200, height: int = 14) -> PiratesLevel:
    """
    テスト用のランダムなレベルを生成する

    コインは最大38枚、パワーアップは最大4個なので、最大スコアは460を超えない。
    """
    grid = [["."] * width for _ in range(height)]
    for x in range(width):
        grid[height - 1][x] = grid[height - 2][x] = "#"
    ground = height - 3
    x = 12
    while x < width - 16:
        x += int(rng.integers(10, 22))
        if x >= width - 16:
            break
        kind = rng.integers(0, 3)
        if kind == 0:
            for dx in range(int(rng.integers(2, 4))):
                grid[height - 1][x + dx] = grid[height - 2][x + dx] = "."
        elif kind == 1:
            for dx in range(int(rng.integers(3, 7))):
                grid[ground - 1][x + dx] = "#"
        else:
            grid[ground][x] = "E"

    free = [c for c in range(6, width - 8) if grid[ground][c] == "." and grid[height - 2][c] == "#"]
    picks = rng.choice(free, size=min(len(free), 42), replace=False)
    n_coins = int(rng.integers(10, 39))
    for i, c in enumerate(sorted(int(p) for p in picks)):
        if i < n_coins:
            grid[ground][c] = "o"
        elif i < n_coins + 4:
            grid[ground][c] = "P"
    for c in (width // 4, width // 2, 3 * width // 4):
        if grid[ground][c] == "." and grid[height - 2][c] == "#":
            grid[ground][c] = "C"
    grid[ground][2] = "S"
    grid[ground][width - 4] = "X"
    return parse_level("\n".join("".join(r) for r in grid))


def _tiles(a: float, b: float) -> range:
    return range(math.floor(a), math.floor(b - EPS) + 1)


def _is_solid(level: PiratesLevel, collected: FrozenSet[str], tx: int, ty: int) -> bool:
    # 左右の端は壁、下は穴（落下死）、上は空
    if tx < 0 or tx >= level.width:
        return True
    if ty < 0 or ty >= level.height:
        return False
    if level.solid[tx, ty]:
        return True
    bid = level.breakable_at.get((tx, ty))
    return bid is not None and bid not in collected


def _solid_cells(level, collected, x, y, w, h) -> List[Tuple[int, int]]:
    return [(tx, ty) for tx in _tiles(x, x + w) for ty in _tiles(y, y + h) if _is_solid(level, collected, tx, ty)]


def _overlaps(ax, ay, aw, ah, bx, by, bw, bh) -> bool:
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def _move_enemies(level: PiratesLevel, state: PiratesState, dt: float):
    moved = []
    for eid, ex, ey, direction in state.enemies:
        if eid in state.collected:
            moved.append((eid, ex, ey, direction))
            continue
        nx = ex + direction * ENEMY_SPEED * dt
        lead = nx + ENEMY_W if direction > 0 else nx
        # 壁か足場の切れ目で折り返す
        blocked = _is_solid(level, state.collected, math.floor(lead), ey) or not _is_solid(
            level, state.collected, math.floor(lead), ey - 1
        )
        if blocked:
            moved.append((eid, ex, ey, -direction))
        else:
            moved.append((eid, nx, ey, direction))
    return tuple(moved)


def pirates_tick(level: PiratesLevel, state: PiratesState, action: Action, dt: float,
                 params: PiratesRewardParams = PiratesRewardParams()) -> PiratesState:
    """
    1tick分のプラットフォーマーの更新

    水平移動（左/静止/右）→ 接地時のみジャンプ → 重力 → 衝突解決 →
    収集物・敵・チェックポイント・ゴールの判定、の順に処理する。
    死亡時は最後のチェックポイントに復帰し、スコアと取得済み集合はそのまま残る。

    引数:
        level: 静的なレベル
        state: 現在の状態
        action: 行動（分岐0: 0=左, 1=静止, 2=右 / 分岐1: 0=なし, 1=ジャンプ）
        dt: 1tickの秒数

    戻り値:
        PiratesState: 1tick後の状態
    """
    move = action.discrete[0] - 1
    jump = action.discrete[1] == 1
    collected = state.collected
    enemies = _move_enemies(level, state, dt)

    # 水平方向
    vx = move * RUN_SPEED
    facing = move if move != 0 else state.facing
    x = state.x + vx * dt
    hits = _solid_cells(level, collected, x, state.y, PLAYER_W, PLAYER_H)
    if hits:
        if vx > 0:
            x = min(tx for tx, _ in hits) - PLAYER_W
        elif vx < 0:
            x = max(tx for tx, _ in hits) + 1.0
        else:
            x = state.x
        vx = 0.0

    # 垂直方向（放物線の厳密解で積分）
    vy = state.vy
    if jump and state.grounded:
        vy = JUMP_SPEED
    y = state.y + vy * dt - 0.5 * GRAVITY * dt * dt
    vy = max(vy - GRAVITY * dt, -MAX_FALL_SPEED)
    grounded = False
    hits = _solid_cells(level, collected, x, y, PLAYER_W, PLAYER_H)
    if hits:
        if y < state.y:
            below = [ty for _, ty in hits if ty + 1.0 <= state.y + 1e-6]
            y = (max(below) + 1.0) if below else state.y
            grounded = True
        else:
            above = [ty for _, ty in hits if ty >= state.y + PLAYER_H - 1e-6]
            y = (min(above) - PLAYER_H) if above else state.y
            # 下から叩いた壊せるブロックは壊れる
            bumped = {(tx, ty) for tx, ty in hits if ty in above}
            broken = {bid for bid, pos in level.breakables.items() if pos in bumped and bid not in collected}
            collected = collected | broken
        vy = 0.0

    moved_right = x > state.x + EPS
    score, coins, powerups = state.score, state.coins, state.powerups
    powered, power_ticks = state.powered_up, state.power_ticks
    if powered:
        power_ticks -= 1
        powered = power_ticks > 0

    # 収集物は1tickに1つだけ（残りは次のtick）
    covered = [(tx, ty) for tx in _tiles(x, x + PLAYER_W) for ty in _tiles(y, y + PLAYER_H)]
    touching = sorted(
        level.collectible_at[pos] for pos in covered
        if pos in level.collectible_at and level.collectible_at[pos] not in collected
    )
    if touching:
        cid = touching[0]
        collected = collected | {cid}
        if cid in level.coins:
            score += params.coin_value
            coins += 1
        else:
            score += params.powerup_value
            powerups += 1
            powered, power_ticks = True, int(round(POWER_SECONDS / dt))

    died = y < -1.0
    for eid, ex, ey, _ in enemies:
        if died or eid in collected:
            continue
        if _overlaps(x, y, PLAYER_W, PLAYER_H, ex, ey, ENEMY_W, ENEMY_H):
            if powered:
                # パワーアップ中は1回だけ敵を倒せる
                collected = collected | {eid}
                powered, power_ticks = False, 0
            else:
                died = True

    last_checkpoint = state.last_checkpoint
    for pos in covered:
        if pos in level.checkpoints:
            last_checkpoint = pos
    reached_exit = not died and any(pos in level.exits for pos in covered)

    deaths = state.deaths
    if died:
        deaths += 1
        x, y = last_checkpoint[0] + 0.1, float(last_checkpoint[1])
        vx = vy = 0.0
        grounded = False
        powered, power_ticks = False, 0

    return replace(
        state, x=x, y=y, vx=vx, vy=vy, facing=facing, grounded=grounded, health=1,
        powered_up=powered, power_ticks=power_ticks, last_checkpoint=last_checkpoint,
        collected=collected, enemies=enemies, score=score, coins=coins, powerups=powerups,
        deaths=deaths, moved_right=moved_right, died=died, reached_exit=reached_exit,
        tick=state.tick + 1,
    )


def pirates_behaviour_reward(prev: PiratesState, cur: PiratesState,
                             params: PiratesRewardParams = PiratesRewardParams()) -> float:
    """R_B = ΔR_E + M_r·[右に動いた] − D·[死亡]"""
    reward = cur.score - prev.score
    if cur.moved_right:
        reward += params.move_right_bonus
    if cur.died:
        reward -= params.death_penalty
    return reward


def player_tile(state: PiratesState) -> Tuple[int, int]:
    return math.floor(state.x + PLAYER_W / 2), math.floor(state.y + PLAYER_H / 2)


def observe_pirates(level: PiratesLevel, state: PiratesState) -> Observation:
    """プレイヤー中心の11×11グリッドと7つのプロパティ"""
    cx, cy = player_tile(state)
    r = pad = VIEW_RADIUS
    rows, cols = level.base_ids.shape
    top, left = cy - r + pad, cx - r + pad
    # base_ids は[y, x]で下から上の順。最後に上下反転して上の行を先頭にする
    if 0 <= top and top + 2 * r + 1 <= rows and 0 <= left and left + 2 * r + 1 <= cols:
        window = level.base_ids[top:top + 2 * r + 1, left:left + 2 * r + 1].copy()
    else:
        window = _clipped_window(level, cx, cy)

    def put(tx, ty, value):
        col, row = tx - cx + r, ty - cy + r
        if 0 <= col <= 2 * r and 0 <= row <= 2 * r:
            window[row, col] = value

    for eid in state.collected:
        pos = level.coins.get(eid) or level.powerups.get(eid) or level.breakables.get(eid)
        if pos is not None:
            put(pos[0], pos[1], EMPTY)
    # 敵は最優先なので最後に上書きする
    for eid, ex, ey, _ in state.enemies:
        if eid not in state.collected:
            put(math.floor(ex + ENEMY_W / 2), ey, ENEMY)

    grid = window[::-1].copy()
    grid[r, r] = PLAYER
    properties = np.array([
        state.vx / RUN_SPEED,
        state.vy / MAX_FALL_SPEED,
        float(state.facing),
        float(state.grounded),
        float(state.health),
        float(state.powered_up),
        max(0.0, 1.0 - state.tick / state.max_ticks),
    ], dtype=np.float64)
    return Observation(grid=grid, properties=properties)


def _clipped_window(level: PiratesLevel, cx: int, cy: int) -> np.ndarray:
    # 落下中などでパディングより外に出た場合は1セルずつ埋める
    r, pad = VIEW_RADIUS, VIEW_RADIUS
    out = np.full((2 * r + 1, 2 * r + 1), OBSTACLE, dtype=np.int64)
    rows, cols = level.base_ids.shape
    for row in range(2 * r + 1):
        for col in range(2 * r + 1):
            gy, gx = cy - r + row + pad, cx - r + col + pad
            if 0 <= gy < rows and 0 <= gx < cols:
                out[row, col] = level.base_ids[gy, gx]
    return out


class PiratesEnv(GameEnv):
    """2D横スクロールのプラットフォーマー"""

    game_id = "pirates"
    action_spec = ActionSpec((3, 2), 0)
    grid_shape = (11, 11)
    n_grid_ids = 6
    property_size = 7
    feature_names = GAME_FEATURES["pirates"]

    def __init__(self, level: Optional[PiratesLevel] = None, layout: str = "fixed",
                 params: PiratesRewardParams = PiratesRewardParams(), **kwargs):
        super().__init__(**kwargs)
        self.fixed_level = level or load_level()
        self.layout = layout
        self.params = params
        self.level = self.fixed_level

    def _new_state(self, rng: np.random.Generator) -> PiratesState:
        self.level = generate_level(rng) if self.layout == "generated" else self.fixed_level
        # 敵の初期の向きだけシードで変わる
        enemies = tuple(
            (eid, float(x), y, int(rng.choice([-1, 1])))
            for eid, (x, y) in sorted(self.level.enemy_spawns.items())
        )
        sx, sy = self.level.start
        return PiratesState(
            x=sx + 0.1, y=float(sy), last_checkpoint=(sx, sy), enemies=enemies,
            max_ticks=self.clock.max_ticks,
        )

    def _tick(self, state: PiratesState, action: Action) -> PiratesState:
        return pirates_tick(self.level, state, action, self.clock.dt, self.params)

    def _observe(self, state: PiratesState) -> Observation:
        return observe_pirates(self.level, state)

    def _behaviour_reward(self, prev: PiratesState, cur: PiratesState) -> float:
        return pirates_behaviour_reward(prev, cur, self.params)

    def _score(self, state: PiratesState) -> float:
        return state.score

    def _features(self, prev: PiratesState, cur: PiratesState) -> Sequence[float]:
        return (cur.score, float(cur.health), cur.x, float(cur.coins), float(cur.deaths))

    def _goal_reached(self, state: PiratesState) -> bool:
        return state.reached_exit


if __name__ == "__main__":
    # ランダム行動で1エピソード
    env = PiratesEnv()
    env.reset(seed=0)
    rng = np.random.default_rng(0)
    result = None
    while result is None or not result.done:
        result = env.step(env.sample_action(rng))
    print(f"tick={result.tick}, score={result.score}, x={env.state.x:.1f}, deaths={env.state.deaths}")
