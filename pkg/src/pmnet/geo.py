"""Rasterized scenes: obstacle grids, procedural map generation, line of sight.

A scene is a square grid of obstacle classes with pixel centers on integer
coordinates. Cell values double as the on-disk PNG encoding: FREE=255,
BUILDING=0, FOLIAGE=128.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

FREE = 255
BUILDING = 0
FOLIAGE = 128

_CLASS_VALUES = (FREE, BUILDING, FOLIAGE)


@dataclass(frozen=True)
class BuildingMap:
    """Square obstacle raster plus physical scale.

    cells[y, x] holds the obstacle class of the pixel centered at (x, y).
    """

    cells: np.ndarray
    meters_per_pixel: float
    map_id: str

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        object.__setattr__(self, "cells", cells)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
            raise ValueError(f"map must be square, got shape {cells.shape}")
        if self.meters_per_pixel <= 0:
            raise ValueError("meters_per_pixel must be positive")
        bad = ~np.isin(cells, _CLASS_VALUES)
        if bad.any():
            raise ValueError("cells contain values outside {FREE, BUILDING, FOLIAGE}")
        if not (cells == FREE).any():
            raise ValueError("map has no FREE cell")

    @property
    def size(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def is_free(self, x: int, y: int) -> bool:
        return self.cells[y, x] == FREE

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height


@dataclass(frozen=True)
class TxLocation:
    """Transmitter pixel position and antenna height in meters."""

    x: int
    y: int
    h_bs: float = 10.0


@dataclass(frozen=True)
class LinkGeometry:
    d_2d: float
    d_3d: float
    los: bool


def generate_map(
    seed: int,
    size: int,
    density: float,
    block_size_range: tuple[int, int] = (6, 16),
    foliage_fraction: float = 0.0,
) -> BuildingMap:
    """Procedurally generate a square map of axis-aligned rectangular buildings.

    Rectangles are stamped until the BUILDING fraction reaches `density`.
    Placements that would eliminate the last FREE cell are rejected; after 100
    consecutive rejections the requested density is deemed unreachable.
    Deterministic for a fixed seed.
    """
    if not 0 <= density < 1:
        raise ValueError("density must be in [0, 1)")
    if size < 32:
        raise ValueError("size must be >= 32")
    lo, hi = block_size_range
    if not 1 <= lo <= hi:
        raise ValueError("invalid block_size_range")

    rng = np.random.default_rng(seed)
    cells = np.full((size, size), FREE, dtype=np.uint8)
    total = size * size
    rejections = 0
    while (cells == BUILDING).sum() / total < density:
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        patch = cells[y0 : y0 + h, x0 : x0 + w]
        free_outside = (cells == FREE).sum() - (patch == FREE).sum()
        if free_outside == 0:
            rejections += 1
            if rejections > 100:
                raise ValueError(
                    f"density {density} leaves no FREE cell after 100 placement attempts"
                )
            continue
        rejections = 0
        patch[...] = BUILDING

    if foliage_fraction > 0:
        target = foliage_fraction * total
        attempts = 0
        while (cells == FOLIAGE).sum() < target and attempts < 10_000:
            attempts += 1
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            patch = cells[y0 : y0 + h, x0 : x0 + w]
            free = patch == FREE
            # keep at least one FREE cell on the map
            if free.sum() == (cells == FREE).sum():
                free[0, 0] = False
            patch[free] = FOLIAGE

    map_id = f"m{seed:08d}s{size}"
    return BuildingMap(cells=cells, meters_per_pixel=1.0, map_id=map_id)


def supercover_cells(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """All grid cells the segment between two pixel centers touches, in order.

    Cells are closed unit squares around integer centers; a segment passing
    exactly through a corner touches all four adjacent cells. Integer
    arithmetic only, so corner ties are exact.
    """
    dx = x1 - x0
    dy = y1 - y0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    adx, ady = abs(dx), abs(dy)
    ix, iy = x0, y0
    k = m = 1  # index of the next x/y half-integer boundary to cross
    cells = [(ix, iy)]
    while k <= adx or m <= ady:
        if m > ady:
            cross_x, cross_y = True, False
        elif k > adx:
            cross_x, cross_y = False, True
        else:
            # compare (k - 1/2)/adx vs (m - 1/2)/ady without division
            lhs = (2 * k - 1) * ady
            rhs = (2 * m - 1) * adx
            cross_x = lhs <= rhs
            cross_y = rhs <= lhs
        if cross_x and cross_y:
            # exact corner: both side cells are touched, then the diagonal
            cells.append((ix + sx, iy))
            cells.append((ix, iy + sy))
            ix += sx
            iy += sy
            k += 1
            m += 1
        elif cross_x:
            ix += sx
            k += 1
        else:
            iy += sy
            m += 1
        cells.append((ix, iy))
    return cells


def line_of_sight(bmap: BuildingMap, tx: tuple[int, int], rx: tuple[int, int]) -> bool:
    """True iff no BUILDING cell lies on the supercover between tx and rx.

    Endpoints are excluded from the occlusion test; FOLIAGE never blocks.
    """
    x0, y0 = tx
    x1, y1 = rx
    if not (bmap.in_bounds(x0, y0) and bmap.in_bounds(x1, y1)):
        raise ValueError("tx/rx out of bounds")
    cells = bmap.cells
    for cx, cy in supercover_cells(x0, y0, x1, y1):
        if (cx, cy) == (x0, y0) or (cx, cy) == (x1, y1):
            continue
        if cells[cy, cx] == BUILDING:
            return False
    return True


def los_mask(bmap: BuildingMap, tx: tuple[int, int]) -> np.ndarray:
    """Boolean LoS grid from a fixed TX to every pixel center.

    Identical semantics to per-pixel line_of_sight; runs as a compiled kernel.
    """
    x0, y0 = tx
    if not bmap.in_bounds(x0, y0):
        raise ValueError("tx out of bounds")
    from pmnet._kernels import los_mask_kernel

    blocked = bmap.cells == BUILDING
    return los_mask_kernel(blocked, x0, y0)


def link_geometry(
    bmap: BuildingMap,
    tx: TxLocation,
    rx: tuple[int, int],
    h_ut: float = 1.5,
) -> LinkGeometry:
    """2D/3D link distances in meters plus the LoS condition."""
    rx_x, rx_y = rx
    if not (bmap.in_bounds(tx.x, tx.y) and bmap.in_bounds(rx_x, rx_y)):
        raise ValueError("tx/rx out of bounds")
    d_2d = math.hypot(rx_x - tx.x, rx_y - tx.y) * bmap.meters_per_pixel
    d_3d = math.hypot(d_2d, tx.h_bs - h_ut)
    return LinkGeometry(d_2d=d_2d, d_3d=d_3d, los=line_of_sight(bmap, (tx.x, tx.y), rx))


def random_free_cell(bmap: BuildingMap, rng: np.random.Generator) -> tuple[int, int]:
    ys, xs = np.nonzero(bmap.cells == FREE)
    i = int(rng.integers(0, xs.size))
    return int(xs[i]), int(ys[i])


def save_map(bmap: BuildingMap, path: str | Path, extra_meta: dict | None = None) -> None:
    """Write the map as an 8-bit grayscale PNG plus a JSON sidecar."""
    path = Path(path)
    Image.fromarray(bmap.cells, mode="L").save(path)
    meta = {
        "map_id": bmap.map_id,
        "meters_per_pixel": bmap.meters_per_pixel,
    }
    if extra_meta:
        meta.update(extra_meta)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_map(path: str | Path) -> BuildingMap:
    path = Path(path)
    cells = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
    meta = json.loads(path.with_suffix(".json").read_text())
    return BuildingMap(
        cells=cells,
        meters_per_pixel=float(meta["meters_per_pixel"]),
        map_id=str(meta["map_id"]),
    )


def classify_gray(gray: np.ndarray) -> np.ndarray:
    """Snap arbitrary 8-bit gray values to the nearest obstacle class."""
    gray = np.asarray(gray)
    out = np.full(gray.shape, FREE, dtype=np.uint8)
    out[gray < 64] = BUILDING
    out[(gray >= 64) & (gray < 192)] = FOLIAGE
    return out
