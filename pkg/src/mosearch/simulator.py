"""Differential-drive kinematics, planar ray sensing, found/reward/termination."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .oracle import FOUND_RADIUS, GeodesicOracle, wrap_angle
from .worldgen import EpisodeSpec, ObjectPlacement, SemanticGrid

V_MAX = 0.5
W_MAX = 1.5
DT = 0.1
ROBOT_RADIUS = 0.18
N_RAYS = 128
FOV = math.radians(79.0)
MAX_DEPTH = 5.6
COLLISION_WINDOW = 16

SPARSE_REWARD = 10.0
TIME_PENALTY = -0.0025
COLLISION_PENALTY = -0.1
DISTANCE_SCALE = 0.1

RUNNING = "running"
SUCCESS = "success"
COLLISION_CAP = "collision_cap"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    radius: float = ROBOT_RADIUS
    last_action: tuple[float, float] = (0.0, 0.0)
    d1: int = 0
    collision_window: tuple[int, ...] = ()
    steps_elapsed: int = 0
    collisions_total: int = 0

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)

    @property
    def d2(self) -> int:
        return sum(self.collision_window)


@dataclass(frozen=True)
class SensorFrame:
    angles: np.ndarray  # absolute world bearings
    distances: np.ndarray
    hit_rows: np.ndarray
    hit_cols: np.ndarray
    hit_classes: np.ndarray
    hit_instances: np.ndarray
    max_range: float = MAX_DEPTH


@dataclass
class StepResult:
    reward: float
    reward_terms: dict
    newly_found: list
    status: str
    d1: int = 0
    clamped: bool = False


def clamp_action(action, v_max: float = V_MAX, w_max: float = W_MAX):
    v, w = float(action[0]), float(action[1])
    if not (math.isfinite(v) and math.isfinite(w)):
        return 0.0, 0.0, True
    cv = min(max(v, -v_max), v_max)
    cw = min(max(w, -w_max), w_max)
    return cv, cw, (cv != v or cw != w)


def _slide(blocked, res, x, y, dx, dy, radius):
    bx, by, found = kernels.nearest_blocked_point(blocked, res, x + dx, y + dy, radius)
    if not found:
        bx, by, found = kernels.nearest_blocked_point(blocked, res, x, y, radius + math.hypot(dx, dy))
    candidates = []
    if found:
        nx, ny = x + dx - bx, y + dy - by
        norm = math.hypot(nx, ny)
        if norm < 1e-12:
            nx, ny = x - bx, y - by
            norm = math.hypot(nx, ny)
        if norm > 1e-12:
            nx, ny = nx / norm, ny / norm
            dot = dx * nx + dy * ny
            if dot < 0:
                candidates.append((dx - dot * nx, dy - dot * ny))
    # axis projections handle corners and axis-aligned walls
    if abs(dx) >= abs(dy):
        candidates += [(dx, 0.0), (0.0, dy)]
    else:
        candidates += [(0.0, dy), (dx, 0.0)]
    for cx, cy in candidates:
        if (cx or cy) and kernels.disc_is_clear(blocked, res, x + cx, y + cy, radius):
            return x + cx, y + cy
    return x, y


def move(state: RobotState, action, blocked: np.ndarray, res: float, dt: float = DT,
         v_max: float = V_MAX, w_max: float = W_MAX) -> tuple[RobotState, bool]:
    """Unicycle integration with slide-along-wall contact.

    Returns the new state and whether the action had to be clamped.
    """
    v, w, clamped = clamp_action(action, v_max, w_max)
    dx = v * math.cos(state.theta) * dt
    dy = v * math.sin(state.theta) * dt
    x, y = state.x, state.y
    collided = 0
    if dx != 0.0 or dy != 0.0:
        if kernels.disc_is_clear(blocked, res, x + dx, y + dy, state.radius):
            x, y = x + dx, y + dy
        else:
            collided = 1
            x, y = _slide(blocked, res, x, y, dx, dy, state.radius)
    window = (state.collision_window + (collided,))[-COLLISION_WINDOW:]
    new = replace(
        state,
        x=x,
        y=y,
        theta=wrap_angle(state.theta + w * dt),
        last_action=(v, w),
        d1=collided,
        collision_window=window,
        steps_elapsed=state.steps_elapsed + 1,
        collisions_total=state.collisions_total + collided,
    )
    return new, clamped


def ray_angles(theta: float, n_rays: int = N_RAYS, fov: float = FOV) -> np.ndarray:
    return theta + np.linspace(-fov / 2, fov / 2, n_rays)


def sense(state: RobotState, grid: SemanticGrid, blocked: np.ndarray | None = None,
          n_rays: int = N_RAYS, fov: float = FOV, max_range: float = MAX_DEPTH) -> SensorFrame:
    blocked = grid.blocked if blocked is None else blocked
    angles = ray_angles(state.theta, n_rays, fov)
    dist = np.empty(n_rays)
    rows = np.empty(n_rays, dtype=np.int64)
    cols = np.empty(n_rays, dtype=np.int64)
    kernels.cast_rays(blocked, grid.resolution, state.x, state.y, angles, max_range, dist, rows, cols)
    hit = rows >= 0
    classes = np.full(n_rays, -1, dtype=np.int64)
    inst = np.full(n_rays, -1, dtype=np.int64)
    classes[hit] = grid.class_id[rows[hit], cols[hit]]
    inst[hit] = grid.instance_id[rows[hit], cols[hit]]
    return SensorFrame(angles, dist, rows, cols, classes, inst, max_range)


def seen_goal_instances(frame: SensorFrame, goal_vector: np.ndarray) -> set[int]:
    hit = frame.hit_instances >= 0
    return {int(i) for i, c in zip(frame.hit_instances[hit], frame.hit_classes[hit])
            if goal_vector[c]}


def adjudicate_found(state: RobotState, seen_set, objects: list[ObjectPlacement],
                     found=(), radius: float = FOUND_RADIUS) -> list[int]:
    out = []
    for obj in objects:
        iid = obj.instance_id
        if iid in seen_set and iid not in found:
            if math.hypot(obj.center[0] - state.x, obj.center[1] - state.y) <= radius:
                out.append(iid)
    return out


def compute_reward(prev_geodesic_d: float, new_geodesic_d: float, newly_found, d1: int,
                   distance_scale: float = DISTANCE_SCALE) -> dict:
    progress = prev_geodesic_d - new_geodesic_d
    return {
        "sparse": SPARSE_REWARD * len(newly_found),
        "time": TIME_PENALTY,
        "distance": distance_scale * progress if math.isfinite(progress) else 0.0,
        "collision": COLLISION_PENALTY * d1,
    }


@dataclass
class Simulator:
    """One episode of the search task (ground-truth side only)."""

    episode: EpisodeSpec
    inflation_radius: float = 0.2
    distance_scale: float = DISTANCE_SCALE
    v_max: float = V_MAX
    w_max: float = W_MAX
    oracle: GeodesicOracle | None = None
    state: RobotState = field(init=False)
    status: str = field(init=False, default=RUNNING)
    seen: set = field(init=False, default_factory=set)
    found: list = field(init=False, default_factory=list)
    path_length: float = field(init=False, default=0.0)
    find_steps: dict = field(init=False, default_factory=dict)

    def __post_init__(self):
        ep = self.episode
        self.grid = ep.grid
        self.blocked = ep.grid.blocked
        if self.oracle is None:
            self.oracle = GeodesicOracle(ep.grid, ep.objects, self.inflation_radius)
        x, y, th = ep.start_pose
        self.state = RobotState(x, y, th)
        self.frame = self.sense()
        self.seen |= seen_goal_instances(self.frame, ep.goal_vector)

    @property
    def unfound(self) -> set[int]:
        return {o.instance_id for o in self.episode.objects} - set(self.found)

    def sense(self) -> SensorFrame:
        return sense(self.state, self.grid, self.blocked)

    def step(self, action) -> StepResult:
        if self.status != RUNNING:
            raise RuntimeError(f"episode already ended with status {self.status!r}")
        ep = self.episode
        target, prev_d = self.oracle.closest(self.state.x, self.state.y, self.unfound)
        old = self.state
        self.state, clamped = move(old, action, self.blocked, self.grid.resolution,
                                   v_max=self.v_max, w_max=self.w_max)
        self.path_length += math.hypot(self.state.x - old.x, self.state.y - old.y)
        self.frame = self.sense()
        self.seen |= seen_goal_instances(self.frame, ep.goal_vector)
        newly = adjudicate_found(self.state, self.seen, ep.objects, self.found)
        self.found.extend(newly)
        for iid in newly:
            self.find_steps[iid] = self.state.steps_elapsed
        new_d = self.oracle.distance(target, self.state.x, self.state.y)
        terms = compute_reward(prev_d, new_d, newly, self.state.d1, self.distance_scale)
        if not self.unfound:
            self.status = SUCCESS
        elif self.state.collisions_total >= ep.collision_cap:
            self.status = COLLISION_CAP
        elif self.state.steps_elapsed >= ep.step_cap:
            self.status = TIMEOUT
        return StepResult(sum(terms.values()), terms, newly, self.status, self.state.d1, clamped)
