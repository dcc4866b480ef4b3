"""Colour-coded global map built from sensor frames, plus egocentric crops.

Cells hold a single palette code.  Codes are ordered by priority so every
update is an elementwise ``max``; that is what makes exploration monotone and
found-recolouring permanent.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
import numpy as np

from . import kernels
from .oracle import bin_center
from .worldgen import N_CLASSES

UNEXPLORED = 0
FREE = 1
TRACE = 2
WALL = 3
OBJECT_BASE = 4
FOUND = OBJECT_BASE + N_CLASSES
OVERLAY = FOUND + 1
N_CODES = OVERLAY + 1

FINE_SIZE = 84
COARSE_SIZE = 224
ARROW_LENGTH = 10

PALETTE = np.array(
    [
        (0, 0, 0),  # unexplored
        (0, 0, 255),  # free
        (255, 0, 0),  # trace
        (0, 255, 0),  # wall
        (255, 255, 0),
        (255, 0, 255),
        (0, 255, 255),
        (255, 128, 0),
        (128, 0, 255),
        (255, 128, 192),
        (128, 128, 0),
        (0, 128, 128),
        (128, 128, 128),  # found
        (255, 255, 255),  # prediction overlay
    ],
    dtype=np.uint8,
)
SNAPSHOT_CHARS = "?.+#abcdefghG*"
SNAPSHOT_FORMAT = "mosearch-map"
SNAPSHOT_VERSION = 1


class UnknownInstanceError(KeyError):
    pass


def object_code(class_id: int) -> int:
    return OBJECT_BASE + class_id


def encode_rgb(codes: np.ndarray) -> np.ndarray:
    return PALETTE[codes]


def decode_rgb(rgb: np.ndarray) -> np.ndarray:
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    lut = {int(r) << 16 | int(g) << 8 | int(b): i for i, (r, g, b) in enumerate(PALETTE)}
    flat = np.array([lut[int(k)] for k in key.ravel()], dtype=np.uint8)
    return flat.reshape(key.shape)


@dataclass
class GlobalMap:
    height: int
    width: int
    resolution: float
    codes: np.ndarray = None
    instance: np.ndarray = None
    found: set = field(default_factory=set)

    def __post_init__(self):
        if self.codes is None:
            self.codes = np.zeros((self.height, self.width), dtype=np.uint8)
        if self.instance is None:
            self.instance = np.full((self.height, self.width), -1, dtype=np.int16)

    @classmethod
    def like(cls, grid) -> "GlobalMap":
        return cls(grid.height, grid.width, grid.resolution)

    def copy(self) -> "GlobalMap":
        return GlobalMap(self.height, self.width, self.resolution, self.codes.copy(),
                         self.instance.copy(), set(self.found))

    @property
    def explored(self) -> np.ndarray:
        return self.codes != UNEXPLORED

    def explored_count(self) -> int:
        return int(np.count_nonzero(self.codes))

    def seen_instances(self) -> set[int]:
        return set(np.unique(self.instance[self.instance >= 0]).tolist())

    def integrate(self, pose, frame) -> "GlobalMap":
        x, y = pose[0], pose[1]
        kernels.mark_rays(self.codes, FREE, self.resolution, x, y, frame.angles,
                          frame.distances, frame.hit_rows, frame.hit_cols, frame.max_range)
        hit = frame.hit_rows >= 0
        rows, cols = frame.hit_rows[hit], frame.hit_cols[hit]
        classes, inst = frame.hit_classes[hit], frame.hit_instances[hit]
        codes = np.where(classes < 0, WALL, OBJECT_BASE + classes).astype(np.uint8)
        if self.found:
            codes[np.isin(inst, list(self.found))] = FOUND
        np.maximum.at(self.codes, (rows, cols), codes)
        obj = inst >= 0
        self.instance[rows[obj], cols[obj]] = inst[obj]
        r, c = int(math.floor(y / self.resolution)), int(math.floor(x / self.resolution))
        if 0 <= r < self.height and 0 <= c < self.width:
            self.codes[r, c] = max(self.codes[r, c], TRACE)
        return self

    def mark_found(self, instance: int) -> "GlobalMap":
        cells = self.instance == instance
        if not cells.any():
            raise UnknownInstanceError(f"instance {instance} has never been observed")
        self.codes[cells] = FOUND
        self.found.add(int(instance))
        return self

    # snapshots ---------------------------------------------------------------

    def dump_snapshot(self, pose=None, step: int | None = None) -> str:
        header = {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "height": self.height,
            "width": self.width,
            "resolution": self.resolution,
            "pose": None if pose is None else [float(v) for v in pose],
            "step": step,
        }
        chars = np.array(list(SNAPSHOT_CHARS))
        lines = ["".join(row) for row in chars[self.codes[::-1]]]
        return json.dumps(header) + "\n" + "\n".join(lines) + "\n"

    @staticmethod
    def load_snapshot(text: str) -> tuple[dict, np.ndarray]:
        head, *rows = text.rstrip("\n").split("\n")
        header = json.loads(head)
        if header.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported map snapshot version {header.get('version')!r}")
        lut = {ch: i for i, ch in enumerate(SNAPSHOT_CHARS)}
        codes = np.array([[lut[ch] for ch in row] for row in rows], dtype=np.uint8)[::-1]
        if codes.shape != (header["height"], header["width"]):
            raise ValueError("snapshot body does not match its header size")
        return header, codes


def integrate(gmap: GlobalMap, pose, frame) -> GlobalMap:
    return gmap.integrate(pose, frame)


def mark_found(gmap: GlobalMap, instance: int) -> GlobalMap:
    return gmap.mark_found(instance)


# ---------------------------------------------------------------------------
# egocentric crops


@dataclass(frozen=True)
class EgoCropPair:
    coarse: np.ndarray  # (224, 224) uint8 codes, 2 cells per pixel
    fine: np.ndarray  # (84, 84) uint8 codes

    def rgb(self) -> tuple[np.ndarray, np.ndarray]:
        return encode_rgb(self.coarse), encode_rgb(self.fine)


def _draw_arrow(img: np.ndarray, alpha: float, length: int = ARROW_LENGTH) -> None:
    half = img.shape[0] // 2
    for s in range(1, length + 1):
        r = half - int(round(s * math.cos(alpha)))
        c = half - int(round(s * math.sin(alpha)))
        if 0 <= r < img.shape[0] and 0 <= c < img.shape[1]:
            img[r, c] = OVERLAY


def extract_ego(gmap: GlobalMap, pose, prev_bin: int | None = None,
                fine_size: int = FINE_SIZE, coarse_size: int = COARSE_SIZE) -> EgoCropPair:
    """Heading-up crops centred on the agent's cell (nearest-neighbour resampling).

    Row 0 is straight ahead; column 0 is to the agent's left.  The coarse crop
    takes the highest-priority code of each 2x2 block.  ``prev_bin`` draws the
    previous prediction as an arrow at that bin's centre angle.
    """
    x, y, theta = pose
    ar = int(math.floor(y / gmap.resolution))
    ac = int(math.floor(x / gmap.resolution))
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    fine = kernels.ego_sample(gmap.codes, ar, ac, cos_t, sin_t, fine_size, 1)
    coarse = kernels.ego_sample(gmap.codes, ar, ac, cos_t, sin_t, coarse_size, 2)
    if prev_bin is not None:
        alpha = bin_center(prev_bin)
        _draw_arrow(fine, alpha)
        _draw_arrow(coarse, alpha)
    return EgoCropPair(coarse, fine)
