"""Procedural apartment floorplans, object spawning and episode packaging."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

N_CLASSES = 8
FLOORPLAN_FORMAT = "mosearch-floorplan"
FLOORPLAN_VERSION = 1
OBJECT_RADIUS = 0.15
MIN_OBJECT_SEPARATION = 1.0
MIN_WALL_CLEARANCE = 0.5

FREE = 0
WALL = 1


class GenerationError(RuntimeError):
    """Floorplan constraints could not be met within the retry budget."""

    def __init__(self, seed: int, reason: str):
        super().__init__(f"floorplan generation failed for seed={seed}: {reason}")
        self.seed = seed


class InfeasibleSpawnError(RuntimeError):
    pass


class MalformedFloorplanError(ValueError):
    pass


class FloorplanVersionError(MalformedFloorplanError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_rooms: int = 6
    room_min: float = 2.0
    room_max: float = 6.0
    corridor_prob: float = 0.35
    corridor_width: float = 1.1
    door_width: float = 0.9
    wall_thickness: float = 0.1
    resolution: float = 0.033
    max_retries: int = 200

    def validate(self) -> None:
        if not 1 <= self.n_rooms <= 10:
            raise ValueError(f"n_rooms must be in [1, 10], got {self.n_rooms}")
        if not 2.0 <= self.room_min <= self.room_max <= 6.0:
            raise ValueError("room sides must satisfy 2 <= room_min <= room_max <= 6 m")
        if self.corridor_width < 1.0:
            raise ValueError("corridor_width must be >= 1.0 m")
        if self.door_width < 0.8:
            raise ValueError("door_width must be >= 0.8 m")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class SemanticGrid:
    """Ground-truth world.  Arrays are indexed ``[row, col]`` = ``[y, x]``."""

    resolution: float
    occupancy: np.ndarray  # uint8, FREE / WALL
    class_id: np.ndarray  # int8, -1 = none
    instance_id: np.ndarray  # int16, -1 = none

    @classmethod
    def empty(cls, height: int, width: int, resolution: float) -> "SemanticGrid":
        return cls(
            resolution,
            np.full((height, width), WALL, dtype=np.uint8),
            np.full((height, width), -1, dtype=np.int8),
            np.full((height, width), -1, dtype=np.int16),
        )

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def walls(self) -> np.ndarray:
        return self.occupancy == WALL

    @property
    def blocked(self) -> np.ndarray:
        """Cells that stop the robot and the sensor: walls and object bodies."""
        return (self.occupancy == WALL) | (self.instance_id >= 0)

    def main_component(self) -> np.ndarray:
        """Largest 8-connected component of non-wall cells."""
        labels, n = ndimage.label(~self.walls, structure=np.ones((3, 3)))
        if n == 0:
            return np.zeros_like(self.walls)
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        return labels == int(np.argmax(sizes))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (col + 0.5) * self.resolution, (row + 0.5) * self.resolution

    def copy(self) -> "SemanticGrid":
        return SemanticGrid(
            self.resolution, self.occupancy.copy(), self.class_id.copy(), self.instance_id.copy()
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticGrid):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.occupancy, other.occupancy)
            and np.array_equal(self.class_id, other.class_id)
            and np.array_equal(self.instance_id, other.instance_id)
        )


@dataclass(frozen=True)
class ObjectPlacement:
    instance_id: int
    class_id: int
    center: tuple[float, float]
    footprint_radius: float = OBJECT_RADIUS

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "class_id": self.class_id,
            "center": list(self.center),
            "footprint_radius": self.footprint_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectPlacement":
        return cls(int(d["instance_id"]), int(d["class_id"]), tuple(map(float, d["center"])),
                   float(d["footprint_radius"]))


@dataclass(eq=False)
class EpisodeSpec:
    seed: int
    grid: SemanticGrid  # with objects rendered in
    objects: list[ObjectPlacement]
    goal_vector: np.ndarray  # int8, length N_CLASSES
    start_pose: tuple[float, float, float]
    step_cap: int = 3500
    collision_cap: int = 600
    floorplan_seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.objects)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EpisodeSpec):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.grid == other.grid
            and self.objects == other.objects
            and np.array_equal(self.goal_vector, other.goal_vector)
            and self.start_pose == other.start_pose
            and self.step_cap == other.step_cap
            and self.collision_cap == other.collision_cap
        )


# ---------------------------------------------------------------------------
# floorplan generation


@dataclass
class _Rect:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def w(self) -> int:
        return self.x1 - self.x0

    @property
    def h(self) -> int:
        return self.y1 - self.y0


@dataclass
class _Layout:
    rooms: list[_Rect] = field(default_factory=list)
    corridors: list[_Rect] = field(default_factory=list)
    # doors as cell rectangles to carve
    doors: list[_Rect] = field(default_factory=list)


class _Retry(Exception):
    pass


def _carve_door(a: _Rect, b: _Rect, axis: int, wt: int, door: int, rng) -> _Rect:
    """Door through the wall band separating ``a`` (low side) and ``b``.

    ``axis`` 0 means a vertical wall at ``x = b.x0``; 1 a horizontal wall
    at ``y = b.y0``.  Leaf rects own the wall band on their low edge.
    """
    if axis == 0:
        lo = max(a.y0, b.y0) + wt
        hi = min(a.y1, b.y1)
    else:
        lo = max(a.x0, b.x0) + wt
        hi = min(a.x1, b.x1)
    margin = wt
    if hi - lo < door + 2 * margin:
        raise _Retry()
    start = int(rng.integers(lo + margin, hi - margin - door + 1))
    if axis == 0:
        return _Rect(b.x0, start, b.x0 + wt, start + door)
    return _Rect(start, b.y0, start + door, b.y0 + wt)


def _adjacent(rects: list[_Rect], axis: int, line: int, side: str) -> list[_Rect]:
    if axis == 0:
        return [r for r in rects if (r.x1 if side == "low" else r.x0) == line]
    return [r for r in rects if (r.y1 if side == "low" else r.y0) == line]


def _overlap(a: _Rect, b: _Rect, axis: int) -> int:
    if axis == 0:
        return min(a.y1, b.y1) - max(a.y0, b.y0)
    return min(a.x1, b.x1) - max(a.x0, b.x0)


def _split(rect: _Rect, n: int, cfg: GenConfig, cells: dict, rng, layout: _Layout) -> list[_Rect]:
    """Recursively split ``rect`` into ``n`` leaf rooms; returns the leaves."""
    wt, rmin, rmax = cells["wt"], cells["rmin"], cells["rmax"]
    if n == 1:
        if not (rmin <= rect.w - wt <= rmax and rmin <= rect.h - wt <= rmax):
            raise _Retry()
        layout.rooms.append(rect)
        return [rect]
    axis = 0 if rect.w >= rect.h else 1
    length = rect.w if axis == 0 else rect.h
    n_low = n // 2 if n > 2 else 1
    if n > 3 and rng.random() < 0.5:
        n_low = n - n // 2
    corridor = 0
    if n >= 3 and rng.random() < cfg.corridor_prob:
        corridor = cells["corr"] + wt
    usable = length - corridor
    frac = n_low / n + rng.uniform(-0.12, 0.12)
    cut = int(round(usable * frac))
    cut = max(min(cut, usable - (rmin + wt)), rmin + wt)
    if axis == 0:
        low = _Rect(rect.x0, rect.y0, rect.x0 + cut, rect.y1)
        mid = _Rect(rect.x0 + cut, rect.y0, rect.x0 + cut + corridor, rect.y1)
        high = _Rect(rect.x0 + cut + corridor, rect.y0, rect.x1, rect.y1)
    else:
        low = _Rect(rect.x0, rect.y0, rect.x1, rect.y0 + cut)
        mid = _Rect(rect.x0, rect.y0 + cut, rect.x1, rect.y0 + cut + corridor)
        high = _Rect(rect.x0, rect.y0 + cut + corridor, rect.x1, rect.y1)
    low_leaves = _split(low, n_low, cfg, cells, rng, layout)
    high_leaves = _split(high, n - n_low, cfg, cells, rng, layout)
    door = cells["door"]
    if corridor:
        layout.corridors.append(mid)
        line_lo = mid.x0 if axis == 0 else mid.y0
        line_hi = mid.x1 if axis == 0 else mid.y1
        for leaf in _adjacent(low_leaves, axis, line_lo, "low"):
            layout.doors.append(_carve_door(leaf, mid, axis, wt, door, rng))
        for leaf in _adjacent(high_leaves, axis, line_hi, "high"):
            layout.doors.append(_carve_door(mid, leaf, axis, wt, door, rng))
    else:
        line = low.x1 if axis == 0 else low.y1
        lows = _adjacent(low_leaves, axis, line, "low")
        highs = _adjacent(high_leaves, axis, line, "high")
        pairs = [(a, b) for a in lows for b in highs if _overlap(a, b, axis) >= door + 3 * wt]
        if not pairs:
            raise _Retry()
        a, b = pairs[int(rng.integers(len(pairs)))]
        layout.doors.append(_carve_door(a, b, axis, wt, door, rng))
    return low_leaves + high_leaves


def _cells(cfg: GenConfig) -> dict:
    res = cfg.resolution
    return {
        "wt": max(1, int(round(cfg.wall_thickness / res))),
        "rmin": int(math.ceil(cfg.room_min / res - 1e-9)),
        "rmax": int(math.floor(cfg.room_max / res + 1e-9)),
        "corr": int(math.ceil(cfg.corridor_width / res - 1e-9)),
        "door": int(math.ceil(cfg.door_width / res - 1e-9)),
    }


def generate_floorplan(seed: int, gen_config: GenConfig | None = None) -> SemanticGrid:
    """BSP room split with optional corridor bands; deterministic in ``seed``."""
    cfg = gen_config or GenConfig()
    cfg.validate()
    cells = _cells(cfg)
    wt = cells["wt"]
    rng = np.random.default_rng([seed, 0x600D])
    for _ in range(cfg.max_retries):
        n = cfg.n_rooms
        if n == 1:
            w = int(rng.integers(cells["rmin"], cells["rmax"] + 1)) + wt
            h = int(rng.integers(cells["rmin"], cells["rmax"] + 1)) + wt
        else:
            side = rng.uniform(cfg.room_min, cfg.room_max) + cfg.wall_thickness
            extra = cfg.corridor_width if cfg.corridor_prob > 0 and n >= 3 else 0.0
            area = n * side * side
            aspect = rng.uniform(1.0, 1.8)
            w_m = math.sqrt(area * aspect) + extra * rng.random()
            h_m = area / math.sqrt(area * aspect)
            if rng.random() < 0.5:
                w_m, h_m = h_m, w_m
            w = int(round(w_m / cfg.resolution))
            h = int(round(h_m / cfg.resolution))
        layout = _Layout()
        try:
            _split(_Rect(0, 0, w, h), n, cfg, cells, rng, layout)
        except _Retry:
            continue
        grid = SemanticGrid.empty(h + wt, w + wt, cfg.resolution)
        occ = grid.occupancy
        for r in layout.rooms + layout.corridors:
            occ[r.y0 + wt:r.y1, r.x0 + wt:r.x1] = FREE
        for d in layout.doors:
            occ[d.y0:d.y1, d.x0:d.x1] = FREE
        free = occ == FREE
        if free.sum() and grid.main_component().sum() >= 0.95 * free.sum():
            return grid
    raise GenerationError(seed, f"no valid layout after {cfg.max_retries} attempts")


# ---------------------------------------------------------------------------
# objects and episodes


def wall_clearance(grid: SemanticGrid) -> np.ndarray:
    """Distance (m) from each cell centre to the nearest wall cell centre."""
    return ndimage.distance_transform_edt(~grid.walls) * grid.resolution


def spawn_objects(grid: SemanticGrid, k: int, seed: int,
                  n_classes: int = N_CLASSES) -> list[ObjectPlacement]:
    """Place ``k`` objects of distinct classes on admissible cells."""
    if not 1 <= k <= 6:
        raise ValueError(f"k must be in [1, 6], got {k}")
    rng = np.random.default_rng([seed, 0x0B1E])
    res = grid.resolution
    # a cell-diagonal of slack makes the centre-to-cell-square distance >= 0.5 m
    admissible = grid.main_component() & (wall_clearance(grid) >= MIN_WALL_CLEARANCE + res)
    rows, cols = np.nonzero(admissible)
    if len(rows) < k:
        raise InfeasibleSpawnError(f"only {len(rows)} admissible cells for k={k}")
    classes = rng.choice(n_classes, size=k, replace=False)
    for _ in range(20):
        order = rng.permutation(len(rows))
        centers: list[tuple[float, float]] = []
        for i in order:
            x, y = grid.cell_center(int(rows[i]), int(cols[i]))
            if all(math.hypot(x - cx, y - cy) >= MIN_OBJECT_SEPARATION for cx, cy in centers):
                centers.append((x, y))
                if len(centers) == k:
                    return [ObjectPlacement(i, int(c), p) for i, (c, p) in
                            enumerate(zip(classes, centers))]
    raise InfeasibleSpawnError(f"could not place {k} objects 1 m apart")


def render_objects(grid: SemanticGrid, objects: list[ObjectPlacement]) -> SemanticGrid:
    out = grid.copy()
    res = grid.resolution
    ys = (np.arange(grid.height) + 0.5) * res
    xs = (np.arange(grid.width) + 0.5) * res
    for obj in objects:
        cx, cy = obj.center
        r = obj.footprint_radius
        r0, r1 = max(int((cy - r) / res) - 1, 0), min(int((cy + r) / res) + 2, grid.height)
        c0, c1 = max(int((cx - r) / res) - 1, 0), min(int((cx + r) / res) + 2, grid.width)
        disc = (xs[None, c0:c1] - cx) ** 2 + (ys[r0:r1, None] - cy) ** 2 <= r * r
        out.class_id[r0:r1, c0:c1][disc] = obj.class_id
        out.instance_id[r0:r1, c0:c1][disc] = obj.instance_id
    return out


def make_episode(seed: int, k: int, gen_config: GenConfig | None = None, *,
                 floorplan_seed: int | None = None, step_cap: int = 3500,
                 collision_cap: int = 600, min_start_distance: float = 2.0,
                 inflation_radius: float = 0.2, start_clearance: float = 0.3,
                 max_retries: int = 25) -> EpisodeSpec:
    """Floorplan + objects + start pose, with every object reachable.

    ``floorplan_seed`` pins the scene while ``seed`` varies objects and start.
    ``min_start_distance`` (geodesic, m) keeps the start outside every found
    radius so the reference path is never degenerate.
    """
    from . import oracle  # local import: oracle depends on this module

    cfg = gen_config or GenConfig()
    fp_seed = seed if floorplan_seed is None else floorplan_seed
    base = generate_floorplan(fp_seed, cfg)
    clearance = wall_clearance(base)
    main = base.main_component()
    rng = np.random.default_rng([seed, 0xE915])
    for attempt in range(max_retries):
        objects = spawn_objects(base, k, int(rng.integers(2**31)))
        grid = render_objects(base, objects)
        geo = oracle.GeodesicOracle(grid, objects, inflation_radius)
        cand = main & (clearance >= start_clearance) & (grid.instance_id < 0)
        dmin = np.full(grid.occupancy.shape, np.inf)
        for obj in objects:
            dmin = np.minimum(dmin, geo.fields[obj.instance_id] * grid.resolution)
        cand &= np.isfinite(dmin) & (dmin >= min_start_distance)
        rows, cols = np.nonzero(cand)
        if len(rows) == 0:
            continue
        i = int(rng.integers(len(rows)))
        x, y = grid.cell_center(int(rows[i]), int(cols[i]))
        theta = float(np.pi - rng.uniform(0.0, 2 * np.pi))
        start = (x, y, theta)
        inflated = oracle.inflate(grid, inflation_radius)
        ok = True
        for obj in objects:
            try:
                oracle.astar_to_object(grid, inflated, obj, (x, y))
            except oracle.NoPathError:
                ok = False
                break
        if not ok:
            continue
        g = np.zeros(N_CLASSES, dtype=np.int8)
        for obj in objects:
            g[obj.class_id] = 1
        return EpisodeSpec(seed, grid, objects, g, start, step_cap, collision_cap, fp_seed)
    raise InfeasibleSpawnError(f"no solvable episode for seed={seed} after {max_retries} tries")


# ---------------------------------------------------------------------------
# floorplan files


def _rle(a: np.ndarray) -> list[list[int]]:
    flat = a.ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def _unrle(runs, shape, dtype, name: str) -> np.ndarray:
    try:
        values = np.array([r[0] for r in runs], dtype=np.int64)
        counts = np.array([r[1] for r in runs], dtype=np.int64)
    except (TypeError, IndexError, KeyError) as exc:
        raise MalformedFloorplanError(f"field '{name}': bad run-length pairs ({exc})") from None
    if counts.size and counts.min() <= 0:
        raise MalformedFloorplanError(f"field '{name}': non-positive run length")
    if counts.sum() != shape[0] * shape[1]:
        raise MalformedFloorplanError(
            f"field '{name}': {counts.sum()} cells encoded, expected {shape[0] * shape[1]}")
    return np.repeat(values, counts).astype(dtype).reshape(shape)


def save_floorplan(grid: SemanticGrid, path, objects: list[ObjectPlacement] = ()) -> None:
    doc = {
        "format": FLOORPLAN_FORMAT,
        "version": FLOORPLAN_VERSION,
        "resolution": grid.resolution,
        "width": grid.width,
        "height": grid.height,
        "occupancy": _rle(grid.occupancy),
        "class_id": _rle(grid.class_id),
        "instance_id": _rle(grid.instance_id),
        "objects": [o.to_dict() for o in objects],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_floorplan(path, with_objects: bool = False):
    """Inverse of :func:`save_floorplan`; nothing is returned on any error."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFloorplanError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise MalformedFloorplanError(f"{path}: top level must be an object")
    if doc.get("format") != FLOORPLAN_FORMAT:
        raise MalformedFloorplanError(f"{path}: field 'format' is {doc.get('format')!r}")
    if doc.get("version") != FLOORPLAN_VERSION:
        raise FloorplanVersionError(
            f"{path}: field 'version' is {doc.get('version')!r}, expected {FLOORPLAN_VERSION}")
    for key in ("resolution", "width", "height", "occupancy", "class_id", "instance_id"):
        if key not in doc:
            raise MalformedFloorplanError(f"{path}: missing field '{key}'")
    try:
        res = float(doc["resolution"])
        shape = (int(doc["height"]), int(doc["width"]))
    except (TypeError, ValueError) as exc:
        raise MalformedFloorplanError(f"{path}: bad header field ({exc})") from None
    if res <= 0 or shape[0] <= 0 or shape[1] <= 0:
        raise MalformedFloorplanError(f"{path}: non-positive resolution or size")
    grid = SemanticGrid(
        res,
        _unrle(doc["occupancy"], shape, np.uint8, "occupancy"),
        _unrle(doc["class_id"], shape, np.int8, "class_id"),
        _unrle(doc["instance_id"], shape, np.int16, "instance_id"),
    )
    if not np.isin(grid.occupancy, (FREE, WALL)).all():
        raise MalformedFloorplanError(f"{path}: field 'occupancy' has values other than 0/1")
    if not with_objects:
        return grid
    try:
        objects = [ObjectPlacement.from_dict(o) for o in doc.get("objects", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFloorplanError(f"{path}: field 'objects': {exc}") from None
    return grid, objects
