"""Non-learned agents (random, scripted oracle follower, SGoLAM) and baseline variants."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from . import kernels
from .agent import NetConfig
from .mapping import FOUND, FREE, OBJECT_BASE, TRACE, UNEXPLORED, WALL, GlobalMap
from .oracle import NoReachableTargetError, inflate_mask, wrap_angle
from .simulator import DT, V_MAX, W_MAX, move, sense
from .training import goal_prediction_loss  # noqa: F401  (re-exported)

EIGHT = np.ones((3, 3), dtype=bool)


def map_only_variant(config: NetConfig = NetConfig()) -> NetConfig:
    """Same network without the direction input, history or prediction head."""
    return NetConfig(**{**config.to_dict(), "channels": tuple(config.channels), "variant": "map_only"})


def goal_prediction_variant(config: NetConfig = NetConfig()) -> NetConfig:
    return NetConfig(**{**config.to_dict(), "channels": tuple(config.channels), "variant": "goal_pred"})


# ---------------------------------------------------------------------------
# control helpers


def pursue(pose, points: np.ndarray, lookahead: float = 0.4, v_max: float = V_MAX,
           w_max: float = W_MAX) -> tuple[float, float]:
    """Pure-pursuit command towards the first path point at least ``lookahead`` away.

    Turns in place when the target lies more than 90 degrees off the heading.
    """
    x, y, th = pose
    d = np.hypot(points[:, 0] - x, points[:, 1] - y)
    far = np.flatnonzero(d >= lookahead)
    tx, ty = points[far[0]] if far.size else points[-1]
    err = wrap_angle(math.atan2(ty - y, tx - x) - th)
    if abs(err) > math.pi / 2:
        return 0.0, math.copysign(w_max, err)
    v = v_max * math.cos(err)
    w = float(np.clip(2.0 * v_max * math.sin(err) / max(lookahead, 1e-6), -w_max, w_max))
    return v, w


class RandomAgent:
    """Uniform random velocity commands."""

    name = "random"

    def __init__(self, seed: int = 0, v_max: float = V_MAX, w_max: float = W_MAX):
        self.rng = np.random.default_rng(seed)
        self.v_max, self.w_max = v_max, w_max

    def reset(self, env=None, seed: int | None = None) -> None:
        if seed is not None:
            self.rng = np.random.default_rng(seed)

    def act(self, env) -> tuple[float, float]:
        return (float(self.rng.uniform(-self.v_max, self.v_max)),
                float(self.rng.uniform(-self.w_max, self.w_max)))


class OracleFollower:
    """Follows the ground-truth geodesic path to the closest unfound object."""

    name = "oracle"

    def __init__(self, lookahead: float = 0.3):
        self.lookahead = lookahead

    def reset(self, env=None, seed: int | None = None) -> None:
        pass

    def act(self, env) -> tuple[float, float]:
        x, y, _ = env.pose
        sim = env.sim
        try:
            iid, _ = sim.oracle.closest(x, y, sim.unfound)
        except NoReachableTargetError:
            return 0.0, W_MAX
        path = sim.oracle.path(iid, x, y, max_len=2.0)
        pts = path.waypoints
        if len(pts) < 2:
            # standing on the source cell: face the object
            obj = sim.oracle.objects[iid]
            pts = np.array([obj.center])
        return pursue(env.pose, pts, self.lookahead)


# ---------------------------------------------------------------------------
# frontier exploration


def frontier_mask(codes: np.ndarray) -> np.ndarray:
    """Free or trace cells with at least one unexplored 8-neighbour."""
    known_free = (codes == FREE) | (codes == TRACE)
    unexplored = codes == UNEXPLORED
    near = ndimage.binary_dilation(unexplored, structure=EIGHT, border_value=0)
    return known_free & near


def frontier_clusters(codes: np.ndarray, min_size: int = 5, exclude=None) -> list[np.ndarray]:
    """8-connected frontier clusters of at least ``min_size`` cells, as (n, 2) row/col arrays."""
    mask = frontier_mask(codes)
    if exclude is not None:
        mask &= ~exclude
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    order = np.argsort(labels.ravel(), kind="stable")
    starts = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for lab in range(1, n + 1):
        if sizes[lab] < min_size:
            continue
        idx = order[starts[lab]:starts[lab + 1]]
        out.append(np.stack(np.unravel_index(idx, codes.shape), axis=1))
    return out


def known_obstacles(codes: np.ndarray) -> np.ndarray:
    return (codes == WALL) | ((codes >= OBJECT_BASE) & (codes <= FOUND))


class SGoLAM:
    """Frontier exploration until a goal-class object shows up on the map, then
    plan to it.  Planning treats unexplored space as free and replans every step.

    A frontier target that is reached (or that the robot stalls on, or that
    has no path) while still being a frontier gets its neighbourhood
    blacklisted so the search moves on.
    """

    name = "sgolam"

    def __init__(self, seed: int = 0, selection: str = "random", inflation_radius: float = 0.2,
                 lookahead: float = 0.4, min_cluster: int = 5, goal_standoff: float = 1.0,
                 reach_radius: float = 0.3, stuck_steps: int = 60, blacklist_radius: float = 0.3):
        if selection not in ("random", "nearest"):
            raise ValueError("selection must be 'random' or 'nearest'")
        self.rng = np.random.default_rng(seed)
        self.selection = selection
        self.inflation_radius = inflation_radius
        self.lookahead = lookahead
        self.min_cluster = min_cluster
        self.goal_standoff = goal_standoff
        self.reach_radius = reach_radius
        self.stuck_steps = stuck_steps
        self.blacklist_radius = blacklist_radius
        self.look_tolerance = 0.3
        self.max_look_steps = 25
        self.reset()

    def reset(self, env=None, seed: int | None = None) -> None:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.blacklist = None
        self.target = None
        self._proxy = {}
        self._progress = []
        self._look_steps = 0

    # -- map queries ---------------------------------------------------------

    def goal_cells(self, codes: np.ndarray, goal_vector) -> np.ndarray:
        classes = [OBJECT_BASE + c for c in np.flatnonzero(np.asarray(goal_vector) > 0)]
        return np.isin(codes, classes)

    def frontiers(self, codes: np.ndarray) -> list[np.ndarray]:
        if self.blacklist is None or self.blacklist.shape != codes.shape:
            self.blacklist = np.zeros(codes.shape, dtype=bool)
        return frontier_clusters(codes, self.min_cluster, self.blacklist)

    # -- control -------------------------------------------------------------

    def command(self, gmap: GlobalMap, pose, goal_vector=None) -> tuple[float, float]:
        codes = gmap.codes
        res = gmap.resolution
        free = ~inflate_mask(known_obstacles(codes), self.inflation_radius, res)
        x, y, _ = pose
        self._progress.append((x, y))
        start = self._start_cell(free, pose, res)
        if start is None:
            return 0.0, W_MAX

        if goal_vector is not None:
            goal = self.goal_cells(codes, goal_vector)
            if goal.any():
                near = ndimage.distance_transform_edt(~goal) * res <= self.goal_standoff
                rows, cols = np.nonzero(near & free)
                if rows.size:
                    i = int(np.argmin(np.hypot((cols + 0.5) * res - x, (rows + 0.5) * res - y)))
                    cmd = self._plan_to(free, start, (rows[i], cols[i]), pose, res)
                    if cmd is not None:
                        return cmd

        for _ in range(64):
            clusters = self.frontiers(codes)
            if not clusters:
                break
            target = self._choose(clusters, free, pose, res)
            if target is None:
                break
            tx, ty = (target[1] + 0.5) * res, (target[0] + 0.5) * res
            if math.hypot(tx - x, ty - y) <= self.reach_radius or self._stuck(pose):
                turn = self._look_at(target, pose, res)
                if turn is not None:
                    return turn
                self._drop(target, res)
                continue
            cmd = self._plan_to(free, start, target, pose, res)
            if cmd is not None:
                return cmd
            self._drop(target, res)
        return 0.0, W_MAX

    def act(self, env) -> tuple[float, float]:
        return self.command(env.gmap, env.pose, env.goal_vector)

    def _start_cell(self, free, pose, res):
        field = np.where(free, 0.0, np.inf)
        r, c, _ = kernels.snap_to_field(field, res, pose[0], pose[1], 0.5)
        return None if r < 0 else (int(r), int(c))

    def _choose(self, clusters, free, pose, res):
        """Keep the current target while it is still a frontier, else pick a cluster."""
        if self.target is not None:
            tr, tc = self._proxy.get(self.target, self.target)
            for cl in clusters:
                if np.any((cl[:, 0] == tr) & (cl[:, 1] == tc)):
                    return self.target
        x, y, _ = pose
        usable = []
        field = np.where(free, 0.0, np.inf)
        for cl in clusters:
            ok = cl[free[cl[:, 0], cl[:, 1]]]
            if not len(ok):
                # frontier hugging an obstacle: aim at the closest free cell instead
                r, c = cl[len(cl) // 2]
                fr, fc, _ = kernels.snap_to_field(field, res, (c + 0.5) * res, (r + 0.5) * res, 0.5)
                if fr < 0:
                    self.blacklist[cl[:, 0], cl[:, 1]] = True
                    continue
                ok = np.array([[fr, fc]])
                self._proxy[(int(fr), int(fc))] = (int(r), int(c))
            usable.append(ok)
        if not usable:
            return None
        if self.selection == "nearest":
            d = [np.min(np.hypot((cl[:, 1] + 0.5) * res - x, (cl[:, 0] + 0.5) * res - y))
                 for cl in usable]
            cl = usable[int(np.argmin(d))]
        else:
            cl = usable[int(self.rng.integers(len(usable)))]
        centroid = cl.mean(axis=0)
        i = int(np.argmin(((cl - centroid) ** 2).sum(1)))
        self.target = (int(cl[i, 0]), int(cl[i, 1]))
        self._progress = [(pose[0], pose[1])]
        return self.target

    def _look_at(self, target, pose, res):
        """On arrival, turn to face the frontier cell once so the sensor sees past it."""
        r, c = self._proxy.get(tuple(target), tuple(target))
        err = wrap_angle(math.atan2((r + 0.5) * res - pose[1], (c + 0.5) * res - pose[0]) - pose[2])
        if abs(err) < self.look_tolerance or self._look_steps >= self.max_look_steps:
            return None
        self._look_steps += 1
        return 0.0, math.copysign(min(W_MAX, abs(err) / DT), err)

    def _stuck(self, pose) -> bool:
        if len(self._progress) <= self.stuck_steps:
            return False
        px, py = self._progress[-self.stuck_steps]
        return math.hypot(pose[0] - px, pose[1] - py) < 0.1

    def _drop(self, target, res) -> None:
        span = int(math.ceil(self.blacklist_radius / res))
        r, c = self._proxy.get(tuple(target), tuple(target))
        rr, cc = np.ogrid[-span:span + 1, -span:span + 1]
        disc = rr ** 2 + cc ** 2 <= span ** 2
        h, w = self.blacklist.shape
        r0, r1 = max(r - span, 0), min(r + span + 1, h)
        c0, c1 = max(c - span, 0), min(c + span + 1, w)
        self.blacklist[r0:r1, c0:c1] |= disc[r0 - r + span:r1 - r + span, c0 - c + span:c1 - c + span]
        self.target = None
        self._look_steps = 0
        self._progress = self._progress[-1:]

    def _plan_to(self, free, start, goal, pose, res):
        rows, cols, _ = kernels.astar_cells(free, start[0], start[1], int(goal[0]), int(goal[1]))
        if len(rows) == 0:
            return None
        pts = np.stack([(cols + 0.5) * res, (rows + 0.5) * res], axis=1)
        if len(pts) == 1:
            pts = np.array([[(goal[1] + 0.5) * res, (goal[0] + 0.5) * res]])
        return pursue(pose, pts, self.lookahead)


def explore(episode, agent: SGoLAM, step_cap: int = 3500, inflation_radius: float = 0.2):
    """Pure exploration run (no goal, no termination on finds).

    Returns ``(steps, map)`` where steps is the first step at which no
    frontier cluster is left, or None if that never happens within the cap.
    """
    from .simulator import RobotState

    grid = episode.grid
    blocked = grid.blocked
    state = RobotState(*episode.start_pose)
    gmap = GlobalMap.like(grid)
    gmap.integrate(state.pose, sense(state, grid, blocked))
    agent.reset()
    for step in range(step_cap + 1):
        if not agent.frontiers(gmap.codes):
            return step, gmap
        if step == step_cap:
            break
        cmd = agent.command(gmap, state.pose)
        state, _ = move(state, cmd, blocked, grid.resolution, DT)
        gmap.integrate(state.pose, sense(state, grid, blocked))
    return None, gmap
