import math
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from affect_model import GAME_FEATURES
from env_core import Action, ActionSpec, GameEnv, Observation
from env_pirates import LevelFormatError

TRACK_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tracks", "solid_rally_track.txt")

WAYPOINTS_PER_LAP = 8
LAPS = 3

# 車両モデル（単位/秒）
ACCELERATION = 8.0
BRAKE_DECEL = 16.0
COAST_DECEL = 3.0
MAX_FORWARD_SPEED = 20.0
MAX_REVERSE_SPEED = 5.0
STEER_RATE = math.radians(60.0)
FULL_STEER_SPEED = 5.0
STUCK_SECONDS = 5.0
STUCK_SPEED = 0.5

RAY_COUNT = 8
RAY_LENGTH = 30.0
RAY_STEP = 0.5
PROPERTY_SIZE = 50


@dataclass(frozen=True)
class RallyRewardParams:
    max_score: float = float(WAYPOINTS_PER_LAP * LAPS)
    speed_norm: float = MAX_FORWARD_SPEED


@dataclass
class RallyTrack:
    centerline: np.ndarray  # (N, 2) 閉ループ
    width: float
    waypoint_indices: Tuple[int, ...]

    def __post_init__(self):
        if len(self.waypoint_indices) != WAYPOINTS_PER_LAP:
            raise LevelFormatError(f"ウェイポイントは{WAYPOINTS_PER_LAP}個必要です: {self.waypoint_indices}")
        n = len(self.centerline)
        if n < 3 or any(not 0 <= i < n for i in self.waypoint_indices):
            raise LevelFormatError("中心線の点数、またはウェイポイントの添字が不正です")
        self.seg_start = self.centerline
        self.seg_end = np.roll(self.centerline, -1, axis=0)
        self.gates = [self._gate(i) for i in self.waypoint_indices]

    def tangent(self, index: int) -> np.ndarray:
        n = len(self.centerline)
        d = self.centerline[(index + 1) % n] - self.centerline[(index - 1) % n]
        return d / np.linalg.norm(d)

    def _gate(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.centerline[index], self.tangent(index)

    def crossed_gate(self, waypoint: int, start: np.ndarray, end: np.ndarray) -> bool:
        """start→end の移動がゲートを進行方向に横切ったか（逆走での通過は数えない）"""
        center, t = self.gates[waypoint]
        before, after = float(np.dot(start - center, t)), float(np.dot(end - center, t))
        if not before < 0.0 <= after:
            return False
        crossing = start + (end - start) * (-before / (after - before))
        normal = np.array([-t[1], t[0]])
        return abs(float(np.dot(crossing - center, normal))) <= self.width / 2 + 0.5

    def gate_center(self, waypoint: int) -> np.ndarray:
        return self.centerline[self.waypoint_indices[waypoint]]

    def distance_to_centerline(self, points: np.ndarray) -> np.ndarray:
        """各点から中心線（折れ線）までの最短距離"""
        points = np.atleast_2d(points)
        a, b = self.seg_start[None], self.seg_end[None]  # (1, N, 2)
        ab = b - a
        ap = points[:, None, :] - a
        t = np.clip(np.sum(ap * ab, axis=2) / np.sum(ab * ab, axis=2), 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.min(np.linalg.norm(points[:, None, :] - closest, axis=2), axis=1)

    def on_track(self, points: np.ndarray) -> np.ndarray:
        return self.distance_to_centerline(points) <= self.width / 2


@dataclass(frozen=True)
class RallyState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    next_waypoint_index: int = 1
    waypoints_passed: int = 0
    last_waypoint: int = 0
    stuck_ticks: int = 0
    off_track: bool = False
    distance_moved: float = 0.0
    tick: int = 0
    max_ticks: int = 1200

    @property
    def laps_completed(self) -> int:
        return self.waypoints_passed // WAYPOINTS_PER_LAP


def parse_track(text: str) -> RallyTrack:
    width, points, waypoints = None, [], None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *values = line.split()
        try:
            if head == "width" and len(values) == 1:
                width = float(values[0])
            elif head == "point" and len(values) == 2:
                points.append((float(values[0]), float(values[1])))
            elif head == "waypoints":
                waypoints = tuple(int(v) for v in values)
            else:
                raise LevelFormatError(f"トラックの行が不正です: 行{number}: {raw!r}")
        except ValueError as e:
            if isinstance(e, LevelFormatError):
                raise
            raise LevelFormatError(f"数値として読めません: 行{number}: {raw!r}")
    if width is None or waypoints is None:
        raise LevelFormatError("width と waypoints の行が必要です")
    return RallyTrack(np.array(points, dtype=np.float64), width, waypoints)


def load_track(path: Optional[str] = None) -> RallyTrack:
    with open(path or TRACK_PATH, "r", encoding="utf-8") as f:
        return parse_track(f.read())


def generate_track(rng: np.random.Generator, n_points: int = 64) -> RallyTrack:
    """半径をランダムに揺らした閉ループ（星形なので中心線は自己交差しない）"""
    t = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    radius = np.ones_like(t)
    for harmonic in (2, 3, 4):
        radius += rng.uniform(0.0, 0.12) * np.cos(harmonic * t + rng.uniform(0.0, 2.0 * np.pi))
    base_x, base_y = rng.uniform(90.0, 120.0), rng.uniform(60.0, 80.0)
    centerline = np.stack([base_x * radius * np.cos(t), base_y * radius * np.sin(t)], axis=1)
    step = n_points // WAYPOINTS_PER_LAP
    return RallyTrack(centerline, float(rng.uniform(12.0, 16.0)), tuple(range(0, n_points, step)))


def start_state(track: RallyTrack, max_ticks: int) -> RallyState:
    """スタート/ゴールのゲート0を少し過ぎた位置から、次はゲート1"""
    index = track.waypoint_indices[0]
    t = track.tangent(index)
    x, y = track.centerline[index] + t * 2.0
    return RallyState(x=float(x), y=float(y), heading=math.atan2(t[1], t[0]), max_ticks=max_ticks)


def _wrap_angle(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def waypoint_angle(track: RallyTrack, state: RallyState) -> float:
    """次のウェイポイントへの方位と車の向きの差（符号付き、[-π, π)）"""
    target = track.gate_center(state.next_waypoint_index)
    bearing = math.atan2(target[1] - state.y, target[0] - state.x)
    return _wrap_angle(bearing - state.heading)


def _update_speed(speed: float, throttle: int, dt: float) -> float:
    if throttle == 0:
        # 後退中のアクセルはまず前進方向へ戻す
        return min(MAX_FORWARD_SPEED, speed + ACCELERATION * dt)
    if throttle == 1:
        if speed > 0:
            return max(0.0, speed - COAST_DECEL * dt)
        return min(0.0, speed + COAST_DECEL * dt)
    if speed > 0:
        return max(0.0, speed - BRAKE_DECEL * dt)
    return max(-MAX_REVERSE_SPEED, speed - ACCELERATION * dt)


def rally_tick(track: RallyTrack, state: RallyState, action: Action, dt: float) -> RallyState:
    """
    1tick分の車両更新

    操舵（分岐0: 左/直進/右）とアクセル（分岐1: 加速/惰性/ブレーキ・後退）を
    運動学モデルで積分する。コース外に出る移動は打ち消して停止させ、
    5秒間動けなければ最後に通過したウェイポイントへ戻す。

    引数:
        track: トラック
        state: 現在の状態
        action: 行動
        dt: 1tickの秒数

    戻り値:
        RallyState: 1tick後の状態
    """
    steer = 1 - action.discrete[0]  # 左が正
    throttle = action.discrete[1]

    speed = _update_speed(state.speed, throttle, dt)
    grip = min(1.0, abs(speed) / FULL_STEER_SPEED)
    heading = _wrap_angle(state.heading + steer * STEER_RATE * grip * math.copysign(1.0, speed) * dt)
    x = state.x + speed * math.cos(heading) * dt
    y = state.y + speed * math.sin(heading) * dt

    off_track = not bool(track.on_track(np.array([x, y]))[0])
    if off_track:
        x, y, speed = state.x, state.y, 0.0

    next_index, passed, last = state.next_waypoint_index, state.waypoints_passed, state.last_waypoint
    start, end = np.array([state.x, state.y]), np.array([x, y])
    # 次のゲート以外を横切っても何も起きない
    if not off_track and track.crossed_gate(next_index, start, end):
        passed += 1
        last = next_index
        next_index = (next_index + 1) % WAYPOINTS_PER_LAP

    moved = math.hypot(x - state.x, y - state.y)
    stuck = state.stuck_ticks + 1 if (off_track or abs(speed) < STUCK_SPEED) and throttle != 1 else 0

    new_state = replace(
        state, x=x, y=y, heading=heading, speed=speed, next_waypoint_index=next_index,
        waypoints_passed=passed, last_waypoint=last, stuck_ticks=stuck, off_track=off_track,
        distance_moved=moved, tick=state.tick + 1,
    )
    if stuck >= int(round(STUCK_SECONDS / dt)):
        index = track.waypoint_indices[last]
        t = track.tangent(index)
        rx, ry = track.centerline[index] + t * 1.0
        new_state = replace(new_state, x=float(rx), y=float(ry), heading=math.atan2(t[1], t[0]),
                            speed=0.0, stuck_ticks=0)
    return new_state


def speed_factor(state: RallyState, params: RallyRewardParams = RallyRewardParams()) -> float:
    return min(1.0, max(0.0, state.speed / params.speed_norm))


def alignment_factor(track: RallyTrack, state: RallyState) -> float:
    """0（真後ろ）〜1（正対）"""
    return 1.0 - abs(waypoint_angle(track, state)) / math.pi


def rally_behaviour_reward(track: RallyTrack, prev: RallyState, cur: RallyState,
                           params: RallyRewardParams = RallyRewardParams()) -> float:
    """R_B = ΔR_E + S·A"""
    return float(cur.waypoints_passed - prev.waypoints_passed) + speed_factor(cur, params) * alignment_factor(track, cur)


def boundary_distances(track: RallyTrack, state: RallyState) -> np.ndarray:
    """車の向きを基準に45°刻み8方向のコース端までの距離（RAY_LENGTHで正規化）"""
    angles = state.heading + np.arange(RAY_COUNT) * (2.0 * np.pi / RAY_COUNT)
    steps = np.arange(1, int(RAY_LENGTH / RAY_STEP) + 1) * RAY_STEP
    xs = state.x + np.cos(angles)[:, None] * steps[None, :]
    ys = state.y + np.sin(angles)[:, None] * steps[None, :]
    inside = track.on_track(np.stack([xs.ravel(), ys.ravel()], axis=1)).reshape(RAY_COUNT, -1)
    distances = np.full(RAY_COUNT, RAY_LENGTH)
    for ray, row in enumerate(inside):
        outside = np.flatnonzero(~row)
        if len(outside):
            distances[ray] = steps[outside[0]] - RAY_STEP
    return distances / RAY_LENGTH


def observe_rally(track: RallyTrack, state: RallyState) -> Observation:
    """グリッドは空、50要素のプロパティベクトル"""
    target = track.gate_center(state.next_waypoint_index)
    extent = float(np.max(np.abs(track.centerline))) + track.width
    one_hot = np.zeros(WAYPOINTS_PER_LAP)
    one_hot[state.next_waypoint_index] = 1.0
    values = np.concatenate([
        [state.x / extent, state.y / extent, math.sin(state.heading), math.cos(state.heading),
         state.speed / MAX_FORWARD_SPEED, waypoint_angle(track, state) / math.pi,
         min(1.0, math.hypot(target[0] - state.x, target[1] - state.y) / (2.0 * extent))],
        boundary_distances(track, state),
        one_hot,
        [state.laps_completed / LAPS, max(0.0, 1.0 - state.tick / state.max_ticks)],
    ])
    properties = np.zeros(PROPERTY_SIZE, dtype=np.float64)
    properties[:len(values)] = values
    return Observation(grid=np.zeros((0, 0), dtype=np.int64), properties=properties)


class SolidRallyEnv(GameEnv):
    """8ウェイポイント×3周のレース（対戦車はダイナミクスに含めない）"""

    game_id = "solid"
    action_spec = ActionSpec((3, 3), 0)
    grid_shape = (0, 0)
    n_grid_ids = 1
    property_size = PROPERTY_SIZE
    feature_names = GAME_FEATURES["solid"]

    def __init__(self, track: Optional[RallyTrack] = None, layout: str = "fixed",
                 params: RallyRewardParams = RallyRewardParams(), **kwargs):
        super().__init__(**kwargs)
        self.fixed_track = track or load_track()
        self.layout = layout
        self.params = params
        self.track = self.fixed_track

    def _new_state(self, rng: np.random.Generator) -> RallyState:
        self.track = generate_track(rng) if self.layout == "generated" else self.fixed_track
        return start_state(self.track, self.clock.max_ticks)

    def _tick(self, state: RallyState, action: Action) -> RallyState:
        return rally_tick(self.track, state, action, self.clock.dt)

    def _observe(self, state: RallyState) -> Observation:
        return observe_rally(self.track, state)

    def _behaviour_reward(self, prev: RallyState, cur: RallyState) -> float:
        return rally_behaviour_reward(self.track, prev, cur, self.params)

    def _score(self, state: RallyState) -> float:
        return float(state.waypoints_passed)

    def _features(self, prev: RallyState, cur: RallyState) -> Sequence[float]:
        return (cur.speed, float(cur.waypoints_passed), waypoint_angle(self.track, cur),
                float(cur.off_track), cur.distance_moved * self.ticks_per_second)

    def _goal_reached(self, state: RallyState) -> bool:
        return state.waypoints_passed >= WAYPOINTS_PER_LAP * LAPS


if __name__ == "__main__":
    env = SolidRallyEnv()
    env.reset(seed=0)
    rng = np.random.default_rng(0)
    result = None
    while result is None or not result.done:
        result = env.step(env.sample_action(rng))
    print(f"tick={result.tick}, waypoints={env.state.waypoints_passed}, speed={env.state.speed:.1f}")
