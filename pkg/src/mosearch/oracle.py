"""Shortest-path machinery on inflated grids.

Besides the textbook A* there is :class:`GeodesicOracle`, which runs one
Dijkstra per object at episode start and answers per-step distance, path and
direction-label queries by lookup.  Both use the same 8-connected graph, so
costs agree exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .kernels import SQRT2
from .worldgen import EpisodeSpec, ObjectPlacement, SemanticGrid

N_BINS = 12
BIN_WIDTH = 2 * math.pi / N_BINS
WAYPOINT_MIN = 0.4
WAYPOINT_MAX = 0.55
FOUND_RADIUS = 1.3
DEFAULT_INFLATION = 0.2
SNAP_RADIUS = 0.5


class NoPathError(RuntimeError):
    """Goal not reachable from start on the given grid."""


class NoReachableTargetError(RuntimeError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0.0:
        a += 2 * math.pi
    return a - math.pi


def angle_bin(alpha: float) -> int:
    # bin 6 is centred on alpha = 0; rounding absorbs ulp noise from +2*pi shifts
    u = math.fmod(alpha + math.pi + BIN_WIDTH / 2, 2 * math.pi)
    if u < 0:
        u += 2 * math.pi
    return int(math.floor(round(u / BIN_WIDTH, 9))) % N_BINS


def bin_center(b: int) -> float:
    return wrap_angle(-math.pi + b * BIN_WIDTH)


BIN_CENTERS = np.array([bin_center(b) for b in range(N_BINS)])


@dataclass(frozen=True)
class AngleLabel:
    alpha: float
    bin: int

    @classmethod
    def from_angle(cls, alpha: float) -> "AngleLabel":
        alpha = wrap_angle(alpha)
        return cls(alpha, angle_bin(alpha))

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(N_BINS)
        v[self.bin] = 1.0
        return v


@dataclass
class InflatedGrid:
    base: SemanticGrid
    radius: float
    blocked: np.ndarray

    @property
    def free(self) -> np.ndarray:
        return ~self.blocked

    @property
    def resolution(self) -> float:
        return self.base.resolution


def inflate_mask(blocked: np.ndarray, radius: float, res: float) -> np.ndarray:
    if radius <= 0 or not blocked.any():
        return blocked.copy()
    dist = ndimage.distance_transform_edt(~blocked)
    return blocked | (dist * res <= radius + 1e-9)


def inflate(grid: SemanticGrid, r: float, blocked: np.ndarray | None = None) -> InflatedGrid:
    """Block every cell whose centre lies within ``r`` of a blocked cell centre."""
    if r < 0:
        raise ValueError("inflation radius must be >= 0")
    base = grid.blocked if blocked is None else blocked
    return InflatedGrid(grid, r, inflate_mask(base, r, grid.resolution))


@dataclass
class Path:
    rows: np.ndarray
    cols: np.ndarray
    resolution: float

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_diagonal(self) -> int:
        if len(self) < 2:
            return 0
        return int(np.count_nonzero((np.diff(self.rows) != 0) & (np.diff(self.cols) != 0)))

    @property
    def cost(self) -> float:
        n_steps = max(len(self) - 1, 0)
        n_diag = self.n_diagonal
        return path_cost(n_steps - n_diag, n_diag, self.resolution)

    @property
    def waypoints(self) -> np.ndarray:
        return np.stack([(self.cols + 0.5) * self.resolution,
                         (self.rows + 0.5) * self.resolution], axis=1)


def path_cost(n_straight: int, n_diagonal: int, res: float) -> float:
    """Cost of a path from its step counts (one fixed summation order)."""
    return res * (n_straight + n_diagonal * SQRT2)


def octile(a: tuple[int, int], b: tuple[int, int], res: float) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return res * (max(dr, dc) + (SQRT2 - 1.0) * min(dr, dc))


def astar(inflated: InflatedGrid, start_cell: tuple[int, int], goal_cell: tuple[int, int],
          return_expanded: bool = False):
    free = inflated.free
    sr, sc = start_cell
    gr, gc = goal_cell
    if not (0 <= sr < free.shape[0] and 0 <= sc < free.shape[1]) or not free[sr, sc]:
        raise ValueError(f"start cell {start_cell} is not free in the inflated grid")
    if not (0 <= gr < free.shape[0] and 0 <= gc < free.shape[1]) or not free[gr, gc]:
        raise NoPathError(f"goal cell {goal_cell} is blocked")
    rows, cols, expanded = kernels.astar_cells(free, sr, sc, gr, gc)
    if len(rows) == 0:
        raise NoPathError(f"no path from {start_cell} to {goal_cell}")
    path = Path(rows, cols, inflated.resolution)
    return (path, expanded) if return_expanded else path


def _object_mask(grid: SemanticGrid, obj: ObjectPlacement) -> np.ndarray:
    return grid.instance_id == obj.instance_id


def object_inflated(grid: SemanticGrid, obj: ObjectPlacement, radius: float) -> InflatedGrid:
    """Inflated grid with the target's own body left traversable."""
    blocked = grid.blocked & ~_object_mask(grid, obj)
    return inflate(grid, radius, blocked)


def nearest_free_cell(free: np.ndarray, res: float, x: float, y: float,
                      radius: float = SNAP_RADIUS) -> tuple[int, int]:
    field = np.where(free, 0.0, np.inf)
    r, c, _ = kernels.snap_to_field(field, res, x, y, radius)
    if r < 0:
        raise NoPathError(f"no free cell within {radius} m of ({x:.3f}, {y:.3f})")
    return int(r), int(c)


def astar_to_object(grid: SemanticGrid, inflated: InflatedGrid | None, obj: ObjectPlacement,
                    xy: tuple[float, float], radius: float = DEFAULT_INFLATION) -> Path:
    """Inflated A* from a continuous position to an object's centre cell."""
    if inflated is None or inflated.blocked[grid.cell_of(*obj.center)]:
        inflated = object_inflated(grid, obj, radius)
    start = nearest_free_cell(inflated.free, grid.resolution, *xy)
    return astar(inflated, start, grid.cell_of(*obj.center))


def waypoint_and_angle(path: Path | np.ndarray, pose: tuple[float, float, float]) -> AngleLabel:
    """Direction label towards the first vertex 0.4-0.55 m along ``path``."""
    pts = path.waypoints if isinstance(path, Path) else np.asarray(path, dtype=float)
    if len(pts) == 0:
        raise ValueError("empty path")
    x, y, theta = pose
    seg = np.hypot(np.diff(pts[:, 0]), np.diff(pts[:, 1]))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    inside = np.flatnonzero((arc >= WAYPOINT_MIN - 1e-12) & (arc <= WAYPOINT_MAX + 1e-12))
    if len(inside):
        idx = int(inside[0])
    else:
        beyond = np.flatnonzero(arc >= WAYPOINT_MIN)
        idx = int(beyond[0]) if len(beyond) else len(pts) - 1
    wx, wy = pts[idx]
    if wx == x and wy == y:
        return AngleLabel.from_angle(0.0)
    return AngleLabel.from_angle(math.atan2(wy - y, wx - x) - theta)


def closest_target(pose, unfound_objects: list[ObjectPlacement], grid: SemanticGrid,
                   radius: float = DEFAULT_INFLATION) -> tuple[ObjectPlacement, float]:
    """Object with the cheapest inflated-A* path; ties go to the lower instance id."""
    if not unfound_objects:
        raise ValueError("need at least one unfound object")
    best = None
    for obj in sorted(unfound_objects, key=lambda o: o.instance_id):
        try:
            cost = astar_to_object(grid, None, obj, pose[:2], radius).cost
        except NoPathError:
            continue
        if best is None or cost < best[1]:
            best = (obj, cost)
    if best is None:
        raise NoReachableTargetError("no unfound object is reachable")
    return best


class GeodesicOracle:
    """Per-object distance fields on per-object inflated grids."""

    def __init__(self, grid: SemanticGrid, objects: list[ObjectPlacement],
                 radius: float = DEFAULT_INFLATION):
        self.grid = grid
        self.radius = radius
        self.res = grid.resolution
        self.objects = {o.instance_id: o for o in objects}
        self.free: dict[int, np.ndarray] = {}
        self.fields: dict[int, np.ndarray] = {}
        for obj in objects:
            free = object_inflated(grid, obj, radius).free
            r, c = grid.cell_of(*obj.center)
            self.free[obj.instance_id] = free
            self.fields[obj.instance_id] = kernels.distance_field(
                free, np.array([r]), np.array([c]))

    def _snap(self, iid: int, x: float, y: float):
        return kernels.snap_to_field(self.fields[iid], self.res, x, y, SNAP_RADIUS)

    def distance(self, iid: int, x: float, y: float) -> float:
        """Geodesic distance (m) from a continuous point; inf if unreachable."""
        r, c, d = self._snap(iid, x, y)
        return math.inf if r < 0 else float(d) * self.res

    def closest(self, x: float, y: float, unfound) -> tuple[int, float]:
        best, best_d = -1, math.inf
        for iid in sorted(unfound):
            d = self.distance(iid, x, y)
            if d < best_d:
                best, best_d = iid, d
        if best < 0:
            raise NoReachableTargetError("no unfound object is reachable")
        return best, best_d

    def path(self, iid: int, x: float, y: float, max_len: float = math.inf) -> Path:
        r, c, _ = self._snap(iid, x, y)
        if r < 0:
            raise NoPathError(f"object {iid} unreachable from ({x:.3f}, {y:.3f})")
        limit = 1e9 if math.isinf(max_len) else max_len / self.res
        rows, cols = kernels.descend_field(self.free[iid], self.fields[iid], r, c, limit)
        return Path(rows, cols, self.res)

    def label(self, pose, unfound) -> tuple[AngleLabel, int, float]:
        """Direction label towards the closest unfound object."""
        iid, d = self.closest(pose[0], pose[1], unfound)
        path = self.path(iid, pose[0], pose[1], WAYPOINT_MAX + 2 * self.res)
        pts = np.vstack([[pose[0], pose[1]], path.waypoints])
        # the continuous position is vertex 0; the snapped cell follows
        return waypoint_and_angle(pts, pose), iid, d

    def leg(self, iid: int, x: float, y: float, found_radius: float = FOUND_RADIUS):
        """Greedy-tour leg: length ``max(0, d - R)`` and the path vertex where the
        remaining cost first drops to ``R`` or below."""
        d = self.distance(iid, x, y)
        if math.isinf(d):
            raise NoPathError(f"object {iid} unreachable")
        if d <= found_radius:
            return 0.0, (x, y)
        path = self.path(iid, x, y)
        field = self.fields[iid][path.rows, path.cols] * self.res
        idx = int(np.flatnonzero(field <= found_radius + 1e-12)[0])
        nx, ny = path.waypoints[idx]
        return d - found_radius, (float(nx), float(ny))


def _tour_length(geo: GeodesicOracle, order, start_xy, found_radius: float) -> float:
    total = 0.0
    pos = start_xy
    for iid in order:
        length, pos = geo.leg(iid, pos[0], pos[1], found_radius)
        total += length
    return total


def greedy_reference_length(episode: EpisodeSpec, radius: float = DEFAULT_INFLATION,
                            found_radius: float = FOUND_RADIUS,
                            geo: GeodesicOracle | None = None) -> float:
    """Tour length always heading to the geodesically nearest unfound object."""
    geo = geo or GeodesicOracle(episode.grid, episode.objects, radius)
    pos = episode.start_pose[:2]
    unfound = {o.instance_id for o in episode.objects}
    total = 0.0
    while unfound:
        iid, _ = geo.closest(pos[0], pos[1], unfound)
        length, pos = geo.leg(iid, pos[0], pos[1], found_radius)
        total += length
        unfound.discard(iid)
    return total


def optimal_reference_length(episode: EpisodeSpec, radius: float = DEFAULT_INFLATION,
                             found_radius: float = FOUND_RADIUS,
                             geo: GeodesicOracle | None = None) -> float:
    """Shortest tour over all visiting orders, with the same truncated legs.

    Leg endpoints depend on the approach path, so subset dynamic programming
    is not exact here; for k <= 6 (720 orders) enumeration is cheap.
    """
    geo = geo or GeodesicOracle(episode.grid, episode.objects, radius)
    ids = sorted(o.instance_id for o in episode.objects)
    return min(_tour_length(geo, order, episode.start_pose[:2], found_radius)
               for order in itertools.permutations(ids))
