import math
import os
from dataclasses import dataclass, replace
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from affect_model import GAME_FEATURES
from env_core import Action, ActionSpec, GameEnv, Observation
from env_pirates import LevelFormatError

MAP_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "maps", "heist_map.txt")

# グリッドID
OBSCURED, EMPTY, OBSTACLE, ENEMY = range(4)
GRID_SIZE = 9
CELL_SIZE = 2.0
FOV_HALF_ANGLE = math.radians(60.0)

PLAYER_RADIUS = 0.4
PLAYER_HEIGHT = 1.8
EYE_HEIGHT = 1.6
MOVE_SPEED = 5.0
TURN_RATE = math.radians(90.0)
MAX_PITCH = math.radians(60.0)
MAX_HEALTH = 100
MAGAZINE = 11
RELOAD_SECONDS = 2.0
HIT_ANGLE = math.radians(2.0)

ENEMY_RADIUS = 0.5
ENEMY_CENTER_Z = 1.0
ENEMY_FIRE_SECONDS = 1.0
ENEMY_DAMAGE = 10
ENEMY_RANGE = 25.0
N_ENEMIES = 25


@dataclass(frozen=True)
class HeistRewardParams:
    kill_value: float = 20.0
    exploration_bonus: float = 1.0
    cube_size: float = 5.0

    @property
    def max_score(self) -> float:
        # 全員を倒したときのR_E
        return self.kill_value * N_ENEMIES


@dataclass(frozen=True)
class Enemy:
    x: float
    y: float
    health: int = 1
    alive: bool = True
    cooldown: int = 0

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, ENEMY_CENTER_Z])


@dataclass
class HeistMap:
    width: float
    depth: float
    height: float
    blocks: np.ndarray  # (M, 6) = x0 y0 z0 x1 y1 z1
    enemy_spawns: List[Tuple[float, float]]
    spawn: Tuple[float, float, float]  # x, y, yaw


@dataclass(frozen=True)
class HeistState:
    x: float
    y: float
    z: float = EYE_HEIGHT
    vx: float = 0.0
    vy: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    health: int = MAX_HEALTH
    ammo: int = MAGAZINE
    reload_ticks_remaining: int = 0
    enemies: Tuple[Enemy, ...] = ()
    visited_cells: FrozenSet[Tuple[int, int, int]] = frozenset()
    kills: int = 0
    deaths: int = 0
    distance_moved: float = 0.0
    entered_new_cube: bool = False
    tick: int = 0
    max_ticks: int = 1200

    @property
    def eye(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def parse_map(text: str) -> HeistMap:
    """ブロック・敵・開始位置のリスト形式をHeistMapに変換"""
    size, spawn, blocks, enemies = None, None, [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *values = line.split()
        try:
            numbers = [float(v) for v in values]
        except ValueError:
            raise LevelFormatError(f"数値として読めません: 行{number}: {raw!r}")
        expected = {"size": 3, "spawn": 3, "block": 6, "enemy": 2}.get(head)
        if expected is None or len(numbers) != expected:
            raise LevelFormatError(f"マップの行が不正です: 行{number}: {raw!r}")
        if head == "size":
            size = numbers
        elif head == "spawn":
            spawn = tuple(numbers)
        elif head == "block":
            blocks.append(numbers)
        else:
            enemies.append(tuple(numbers))
    if size is None or spawn is None:
        raise LevelFormatError("size と spawn の行が必要です")
    if len(enemies) != N_ENEMIES:
        raise LevelFormatError(f"敵は{N_ENEMIES}体必要です: 実際={len(enemies)}")
    block_array = np.array(blocks, dtype=np.float64).reshape(-1, 6)
    return HeistMap(size[0], size[1], size[2], block_array, enemies, spawn)


def load_map(path: Optional[str] = None) -> HeistMap:
    with open(path or MAP_PATH, "r", encoding="utf-8") as f:
        return parse_map(f.read())


def generate_map(rng: np.random.Generator, width: float = 60.0, depth: float = 60.0) -> HeistMap:
    """ランダムな壁と25体の敵を持つマップ（開始位置の近くには置かない）"""
    blocks = []
    for _ in range(int(rng.integers(6, 11))):
        x0, y0 = rng.uniform(8.0, width - 8.0), rng.uniform(8.0, depth - 8.0)
        if rng.random() < 0.5:
            w, d = rng.uniform(1.0, 2.0), rng.uniform(6.0, 20.0)
        else:
            w, d = rng.uniform(6.0, 20.0), rng.uniform(1.0, 2.0)
        blocks.append([x0, y0, 0.0, min(width, x0 + w), min(depth, y0 + d), 5.0])
    block_array = np.array(blocks, dtype=np.float64)

    enemies = []
    while len(enemies) < N_ENEMIES:
        ex, ey = rng.uniform(2.0, width - 2.0), rng.uniform(2.0, depth - 2.0)
        if math.hypot(ex - 4.0, ey - 4.0) < 8.0:
            continue
        inside = ((block_array[:, 0] - 1.0 <= ex) & (ex <= block_array[:, 3] + 1.0)
                  & (block_array[:, 1] - 1.0 <= ey) & (ey <= block_array[:, 4] + 1.0))
        if not inside.any():
            enemies.append((float(ex), float(ey)))
    return HeistMap(width, depth, 5.0, block_array, enemies, (4.0, 4.0, math.pi / 4))


def segment_blocked(blocks: np.ndarray, start: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """
    start から各 ends への線分がブロックに遮られるかをまとめて判定（スラブ法）

    終点を内部に含むブロックは無視するので、障害物セルそのものは「見えている」扱いになる。

    引数:
        blocks: (M, 6) のブロック
        start: (3,) 始点
        ends: (N, 3) 終点

    戻り値:
        np.ndarray: (N,) のbool
    """
    ends = np.atleast_2d(ends)
    if len(blocks) == 0:
        return np.zeros(len(ends), dtype=bool)
    lo, hi = blocks[:, :3], blocks[:, 3:]  # (M, 3)
    d = ends - start  # (N, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo[None, :, :] - start) / d[:, None, :]
        t1 = (hi[None, :, :] - start) / d[:, None, :]
    t_near = np.minimum(t0, t1)
    t_far = np.maximum(t0, t1)
    # 軸に平行な成分はスラブの内側なら(-inf, inf)、外側なら交差なし
    parallel = d[:, None, :] == 0.0
    inside_slab = (lo[None, :, :] <= start) & (start <= hi[None, :, :])
    t_near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t_near)
    t_far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t_far)
    enter = t_near.max(axis=2)
    leave = t_far.min(axis=2)
    hit = (enter <= leave) & (leave > 0.0) & (enter < 1.0 - 1e-9)
    contains_end = np.all((lo[None, :, :] <= ends[:, None, :]) & (ends[:, None, :] <= hi[None, :, :]), axis=2)
    return np.any(hit & ~contains_end, axis=1)


def _point_in_blocks(blocks: np.ndarray, points: np.ndarray) -> np.ndarray:
    if len(blocks) == 0:
        return np.zeros(len(points), dtype=bool)
    lo, hi = blocks[:, :3], blocks[:, 3:]
    return np.any(np.all((lo[None] <= points[:, None]) & (points[:, None] <= hi[None]), axis=2), axis=1)


def _wrap_angle(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _collides(hmap: HeistMap, x: float, y: float) -> bool:
    if x < PLAYER_RADIUS or y < PLAYER_RADIUS or x > hmap.width - PLAYER_RADIUS or y > hmap.depth - PLAYER_RADIUS:
        return True
    b = hmap.blocks
    if len(b) == 0:
        return False
    return bool(np.any(
        (b[:, 0] - PLAYER_RADIUS < x) & (x < b[:, 3] + PLAYER_RADIUS)
        & (b[:, 1] - PLAYER_RADIUS < y) & (y < b[:, 4] + PLAYER_RADIUS)
        & (b[:, 2] < PLAYER_HEIGHT)
    ))


def cube_index(x: float, y: float, z: float, cube_size: float = 5.0) -> Tuple[int, int, int]:
    return math.floor(x / cube_size), math.floor(y / cube_size), math.floor(z / cube_size)


def aim_direction(yaw: float, pitch: float) -> np.ndarray:
    return np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)])


def _respawn(hmap: HeistMap, state: HeistState) -> HeistState:
    sx, sy, syaw = hmap.spawn
    return replace(state, x=sx, y=sy, vx=0.0, vy=0.0, yaw=syaw, pitch=0.0, health=MAX_HEALTH,
                   ammo=MAGAZINE, reload_ticks_remaining=0, deaths=state.deaths + 1)


def heist_tick(hmap: HeistMap, state: HeistState, action: Action, dt: float,
               params: HeistRewardParams = HeistRewardParams()) -> HeistState:
    """
    1tick分のシューターの更新

    連続値で視点を回転（slot0=ヨー, slot1=ピッチ、最大90°/s）→ 向きに対する
    横移動・前後移動 → 射撃（即着弾）→ 敵の反撃 → リロード、の順に処理する。

    引数:
        hmap: マップ
        state: 現在の状態
        action: 行動（分岐0: 横移動, 分岐1: 前後移動, 分岐2: 射撃）
        dt: 1tickの秒数

    戻り値:
        HeistState: 1tick後の状態
    """
    strafe = action.discrete[0] - 1
    forward = action.discrete[1] - 1
    shoot = action.discrete[2] == 1

    yaw = _wrap_angle(state.yaw + action.continuous[0] * TURN_RATE * dt)
    pitch = min(MAX_PITCH, max(-MAX_PITCH, state.pitch + action.continuous[1] * TURN_RATE * dt))

    fx, fy = math.cos(yaw), math.sin(yaw)
    rx, ry = math.sin(yaw), -math.cos(yaw)
    mx, my = forward * fx + strafe * rx, forward * fy + strafe * ry
    norm = math.hypot(mx, my)
    if norm > 1.0:
        mx, my = mx / norm, my / norm
    x, y = state.x, state.y
    nx = x + mx * MOVE_SPEED * dt
    if not _collides(hmap, nx, y):
        x = nx
    ny = y + my * MOVE_SPEED * dt
    if not _collides(hmap, x, ny):
        y = ny
    moved = math.hypot(x - state.x, y - state.y)

    ammo, reload_ticks = state.ammo, state.reload_ticks_remaining
    if reload_ticks > 0:
        reload_ticks -= 1
        if reload_ticks == 0:
            ammo = MAGAZINE

    enemies = list(state.enemies)
    kills = state.kills
    eye = np.array([x, y, state.z])
    if shoot and ammo > 0 and reload_ticks == 0:
        ammo -= 1
        target = _hitscan(hmap, eye, aim_direction(yaw, pitch), enemies)
        if target is not None:
            hit = enemies[target]
            health = hit.health - 1
            enemies[target] = replace(hit, health=health, alive=health > 0)
            if health <= 0:
                kills += 1
        if ammo == 0:
            # 弾切れで自動リロード
            reload_ticks = int(round(RELOAD_SECONDS / dt))

    # 敵の反撃: 視線が通れば1秒ごとに固定ダメージ
    health = state.health
    fire_interval = int(round(ENEMY_FIRE_SECONDS / dt))
    alive_idx = [i for i, e in enumerate(enemies) if e.alive]
    if alive_idx:
        centers = np.array([enemies[i].center for i in alive_idx])
        in_range = np.linalg.norm(centers - eye, axis=1) <= ENEMY_RANGE
        blocked = segment_blocked(hmap.blocks, eye, centers)
        for i, sees in zip(alive_idx, in_range & ~blocked):
            enemy = enemies[i]
            cooldown = enemy.cooldown - 1 if enemy.cooldown > 0 else 0
            if sees and cooldown == 0:
                health -= ENEMY_DAMAGE
                cooldown = fire_interval
            enemies[i] = replace(enemy, cooldown=cooldown)

    cube = cube_index(x, y, state.z, params.cube_size)
    entered = cube not in state.visited_cells
    visited = state.visited_cells | {cube} if entered else state.visited_cells

    new_state = replace(
        state, x=x, y=y, vx=(x - state.x) / dt, vy=(y - state.y) / dt, yaw=yaw, pitch=pitch,
        health=health, ammo=ammo, reload_ticks_remaining=reload_ticks, enemies=tuple(enemies),
        visited_cells=visited, kills=kills, distance_moved=moved, entered_new_cube=entered,
        tick=state.tick + 1,
    )
    if health <= 0:
        # 死亡時は開始地点に戻る。倒した敵は復活しない
        new_state = _respawn(hmap, new_state)
    return new_state


def _hitscan(hmap: HeistMap, eye: np.ndarray, direction: np.ndarray, enemies: Sequence[Enemy]) -> Optional[int]:
    """照準との角度誤差が2°未満で視線の通る最も近い敵"""
    candidates = [i for i, e in enumerate(enemies) if e.alive]
    if not candidates:
        return None
    centers = np.array([enemies[i].center for i in candidates])
    offsets = centers - eye
    dists = np.linalg.norm(offsets, axis=1)
    cosines = np.clip(offsets @ direction / np.maximum(dists, 1e-12), -1.0, 1.0)
    aligned = np.arccos(cosines) < HIT_ANGLE
    visible = ~segment_blocked(hmap.blocks, eye, centers)
    hits = np.flatnonzero(aligned & visible)
    if len(hits) == 0:
        return None
    return candidates[int(hits[np.argmin(dists[hits])])]


def nearest_alive_enemy(state: HeistState) -> Optional[Enemy]:
    alive = [e for e in state.enemies if e.alive]
    if not alive:
        return None
    return min(alive, key=lambda e: (e.x - state.x) ** 2 + (e.y - state.y) ** 2)


def facing_score(state: HeistState) -> float:
    """最も近い生存敵への向き: 正対で1、真後ろで-1（ヨーのみで計算）。敵がいなければ0"""
    enemy = nearest_alive_enemy(state)
    if enemy is None:
        return 0.0
    bearing = math.atan2(enemy.y - state.y, enemy.x - state.x)
    offset = abs(_wrap_angle(bearing - state.yaw))
    return 1.0 - 2.0 * offset / math.pi


def heist_behaviour_reward(prev: HeistState, cur: HeistState,
                           params: HeistRewardParams = HeistRewardParams()) -> float:
    """R_B = ΔR_E + E·[新しいキューブに入った] + A"""
    reward = (cur.kills - prev.kills) * params.kill_value
    if cur.entered_new_cube:
        reward += params.exploration_bonus
    return reward + facing_score(cur)


def _grid_points(state: HeistState) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """視界グリッド各セルの中心（行0が最も遠い、列4が正面）"""
    fx, fy = math.cos(state.yaw), math.sin(state.yaw)
    rx, ry = math.sin(state.yaw), -math.cos(state.yaw)
    rows = np.arange(GRID_SIZE)
    cols = np.arange(GRID_SIZE)
    ahead = (GRID_SIZE - 1 - rows) * CELL_SIZE + CELL_SIZE / 2  # (9,)
    lateral = (cols - GRID_SIZE // 2) * CELL_SIZE  # (9,)
    a, l = np.meshgrid(ahead, lateral, indexing="ij")
    px = state.x + a * fx + l * rx
    py = state.y + a * fy + l * ry
    pz = np.full_like(px, state.z)
    return np.stack([px, py, pz], axis=-1).reshape(-1, 3), a.ravel(), l.ravel()


def visible_enemies(hmap: HeistMap, state: HeistState) -> List[Enemy]:
    alive = [e for e in state.enemies if e.alive]
    if not alive:
        return []
    centers = np.array([e.center for e in alive])
    blocked = segment_blocked(hmap.blocks, state.eye, centers)
    visible = []
    for enemy, hidden in zip(alive, blocked):
        bearing = math.atan2(enemy.y - state.y, enemy.x - state.x)
        if not hidden and abs(_wrap_angle(bearing - state.yaw)) <= FOV_HALF_ANGLE:
            visible.append(enemy)
    return visible


def observe_heist(hmap: HeistMap, state: HeistState) -> Observation:
    """視界内の9×9グリッド（隠れ/空/障害物/敵）と20個のプロパティ"""
    points, ahead, lateral = _grid_points(state)
    grid = np.full(len(points), EMPTY, dtype=np.int64)

    outside = ((points[:, 0] < 0) | (points[:, 0] > hmap.width)
               | (points[:, 1] < 0) | (points[:, 1] > hmap.depth))
    in_block = _point_in_blocks(hmap.blocks, points)
    grid[in_block | outside] = OBSTACLE

    fx, fy = math.cos(state.yaw), math.sin(state.yaw)
    rx, ry = math.sin(state.yaw), -math.cos(state.yaw)
    for enemy in state.enemies:
        if not enemy.alive:
            continue
        dx, dy = enemy.x - state.x, enemy.y - state.y
        ea, el = dx * fx + dy * fy, dx * rx + dy * ry
        match = (np.abs(ahead - ea) <= CELL_SIZE / 2) & (np.abs(lateral - el) <= CELL_SIZE / 2)
        grid[match & ~in_block & ~outside] = ENEMY

    out_of_fov = np.abs(np.arctan2(lateral, ahead)) > FOV_HALF_ANGLE
    hidden = segment_blocked(hmap.blocks, state.eye, points)
    grid[out_of_fov | hidden] = OBSCURED

    diagonal = math.hypot(hmap.width, hmap.depth)
    seen = visible_enemies(hmap, state)
    ex = ey = 0.0
    distance = 1.0
    if seen:
        target = min(seen, key=lambda e: (e.x - state.x) ** 2 + (e.y - state.y) ** 2)
        dx, dy = target.x - state.x, target.y - state.y
        dist = math.hypot(dx, dy)
        if dist > 0:
            ex, ey = (dx * fx + dy * fy) / dist, (dx * rx + dy * ry) / dist
        distance = min(1.0, dist / diagonal)

    total_cubes = math.ceil(hmap.width / 5.0) * math.ceil(hmap.depth / 5.0)
    properties = np.zeros(20, dtype=np.float64)
    properties[:17] = [
        state.x / hmap.width,
        state.y / hmap.depth,
        state.z / hmap.height,
        state.vx / MOVE_SPEED,
        state.vy / MOVE_SPEED,
        math.sin(state.yaw),
        math.cos(state.yaw),
        state.pitch / MAX_PITCH,
        state.health / MAX_HEALTH,
        state.ammo / MAGAZINE,
        float(state.reload_ticks_remaining > 0),
        ex,
        ey,
        distance,
        state.kills / N_ENEMIES,
        max(0.0, 1.0 - state.tick / state.max_ticks),
        len(state.visited_cells) / total_cubes,
    ]
    return Observation(grid=grid.reshape(GRID_SIZE, GRID_SIZE), properties=properties)


class HeistEnv(GameEnv):
    """見下ろし型に落とし込んだシューター"""

    game_id = "heist"
    action_spec = ActionSpec((3, 3, 2), 2)
    grid_shape = (GRID_SIZE, GRID_SIZE)
    n_grid_ids = 4
    property_size = 20
    feature_names = GAME_FEATURES["heist"]

    def __init__(self, hmap: Optional[HeistMap] = None, layout: str = "fixed",
                 params: HeistRewardParams = HeistRewardParams(), **kwargs):
        super().__init__(**kwargs)
        self.fixed_map = hmap or load_map()
        self.layout = layout
        self.params = params
        self.hmap = self.fixed_map

    def _new_state(self, rng: np.random.Generator) -> HeistState:
        self.hmap = generate_map(rng) if self.layout == "generated" else self.fixed_map
        interval = int(round(ENEMY_FIRE_SECONDS * self.ticks_per_second))
        # 敵の射撃タイミングの位相だけシードで変わる
        enemies = tuple(
            Enemy(float(x), float(y), cooldown=int(rng.integers(0, interval)))
            for x, y in self.hmap.enemy_spawns
        )
        sx, sy, syaw = self.hmap.spawn
        return HeistState(
            x=sx, y=sy, yaw=syaw, enemies=enemies,
            visited_cells=frozenset({cube_index(sx, sy, EYE_HEIGHT, self.params.cube_size)}),
            max_ticks=self.clock.max_ticks,
        )

    def _tick(self, state: HeistState, action: Action) -> HeistState:
        return heist_tick(self.hmap, state, action, self.clock.dt, self.params)

    def _observe(self, state: HeistState) -> Observation:
        return observe_heist(self.hmap, state)

    def _behaviour_reward(self, prev: HeistState, cur: HeistState) -> float:
        return heist_behaviour_reward(prev, cur, self.params)

    def _score(self, state: HeistState) -> float:
        return state.kills * self.params.kill_value

    def _features(self, prev: HeistState, cur: HeistState) -> Sequence[float]:
        # 移動距離は秒あたりに直してtick数に依存しないようにする
        return (float(cur.kills), float(cur.ammo), float(cur.health), float(len(cur.visited_cells)),
                cur.distance_moved * self.ticks_per_second)

    def _goal_reached(self, state: HeistState) -> bool:
        return state.kills >= N_ENEMIES


if __name__ == "__main__":
    env = HeistEnv()
    env.reset(seed=0)
    rng = np.random.default_rng(0)
    result = None
    while result is None or not result.done:
        result = env.step(env.sample_action(rng))
    print(f"tick={result.tick}, kills={env.state.kills}, deaths={env.state.deaths}, "
          f"visited={len(env.state.visited_cells)}")
