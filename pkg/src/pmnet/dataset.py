"""Preprocessing pipeline: gray conversion, infill, augmentation, splits.

Sample images are 8-bit: the map channel reuses the obstacle-class encoding,
the TX channel is one-hot (255 at the TX pixel), and the target encodes
received power at 1 dBm per gray step over [-254, 0] dBm with gray 0 reserved
for building pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from pmnet import geo
from pmnet.geo import BuildingMap, TxLocation
from pmnet.propagation import PathlossGrid

GRAY_MIN_DBM = -254.0
GRAY_MAX_DBM = 0.0
BUILDING_GRAY = 0

TRAIN, VAL = "TRAIN", "VAL"


def to_gray(p_rx_dbm):
    """Map dBm to gray in [1, 255] at 1 dBm per step; clamps outside values."""
    g = np.rint(np.asarray(p_rx_dbm, dtype=np.float64) + 255.0)
    g = np.clip(g, 1, 255)
    if np.isscalar(p_rx_dbm):
        return int(g)
    return g.astype(np.uint8)


def from_gray(gray):
    """Inverse gray-to-dBm map. Gray 0 marks buildings and has no power value."""
    g = np.asarray(gray)
    if (g < 1).any():
        raise ValueError("gray 0 is the building marker, not a power value")
    out = g.astype(np.float64) - 255.0
    if np.isscalar(gray):
        return float(out)
    return out


def grid_to_gray(grid: PathlossGrid) -> np.ndarray:
    """Render a pathloss grid as the 8-bit target image (buildings at gray 0)."""
    img = to_gray(grid.values)
    img[~grid.roi_mask] = BUILDING_GRAY
    return img


def _fill_axis(values: np.ndarray, known: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row linear interpolation toward the nearest known pixels.

    Returns (filled, ok) where ok marks pixels with at least one known
    neighbor in their row. Rows are the last axis.
    """
    n_rows, n = values.shape
    idx = np.arange(n)
    filled = np.full_like(values, np.nan, dtype=np.float64)
    ok = np.zeros(values.shape, dtype=bool)
    for r in range(n_rows):
        k = known[r]
        if not k.any():
            continue
        kp = idx[k]
        kv = values[r, k]
        filled[r] = np.interp(idx, kp, kv)  # constant beyond the ends
        ok[r] = True
    return filled, ok


def interpolate_missing(
    values: np.ndarray,
    known_mask: np.ndarray,
    roi_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Fill missing RoI pixels by bilinear interpolation from known neighbors.

    Each missing pixel takes the mean of a row-wise and a column-wise linear
    interpolation between its nearest known pixels; if only one axis has
    known neighbors that axis alone is used. Known pixels pass through
    unchanged; pixels outside the RoI are neither read nor written.
    """
    values = np.asarray(values, dtype=np.float64)
    roi = np.ones(values.shape, dtype=bool) if roi_mask is None else np.asarray(roi_mask, dtype=bool)
    known = np.asarray(known_mask, dtype=bool) & roi
    if not known.any():
        raise ValueError("grid has no known RoI pixel to interpolate from")

    out = values.copy()
    out[~known] = np.nan
    missing = roi & ~known
    # repeated sweeps let isolated regions pick values up from filled rows/cols
    for _ in range(values.shape[0] + values.shape[1]):
        if not (roi & np.isnan(out)).any():
            break
        cur_known = roi & ~np.isnan(out)
        row_fill, row_ok = _fill_axis(out, cur_known)
        col_fill_t, col_ok_t = _fill_axis(out.T, cur_known.T)
        col_fill, col_ok = col_fill_t.T, col_ok_t.T
        target = roi & np.isnan(out)
        both = target & row_ok & col_ok
        out[both] = 0.5 * (row_fill[both] + col_fill[both])
        row_only = target & row_ok & ~col_ok
        out[row_only] = row_fill[row_only]
        col_only = target & col_ok & ~row_ok
        out[col_only] = col_fill[col_only]
    out[~roi] = values[~roi]
    out[known] = values[known]
    return out


@dataclass
class GraySample:
    """One training sample: map channel, TX one-hot channel, gray target."""

    map_channel: np.ndarray
    tx_channel: np.ndarray
    target: np.ndarray
    scene_id: str
    map_id: str
    meters_per_pixel: float
    crop_index: int = 0
    aug_tag: str = ""

    def __post_init__(self):
        shapes = {self.map_channel.shape, self.tx_channel.shape, self.target.shape}
        if len(shapes) != 1:
            raise ValueError("sample channels must share one shape")
        if int((self.tx_channel == 255).sum()) != 1:
            raise ValueError("tx_channel must contain exactly one TX pixel")
        building = self.map_channel == geo.BUILDING
        if not np.array_equal(self.target == BUILDING_GRAY, building):
            raise ValueError("target must be gray 0 exactly on building pixels")

    @property
    def sample_id(self) -> str:
        tag = f"_{self.aug_tag}" if self.aug_tag else ""
        return f"{self.scene_id}_c{self.crop_index:03d}{tag}"

    @property
    def tx_xy(self) -> tuple[int, int]:
        ys, xs = np.nonzero(self.tx_channel == 255)
        return int(xs[0]), int(ys[0])


def _bilinear_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    src = Image.fromarray(np.asarray(img, dtype=np.float32), mode="F")
    return np.asarray(src.resize((out_size, out_size), Image.BILINEAR), dtype=np.float64)


def scene_to_sample(
    bmap: BuildingMap,
    grid: PathlossGrid,
    tx: TxLocation,
    scene_id: str | None = None,
    tx_dilation: int = 0,
) -> GraySample:
    """Use a full-resolution scene directly as one sample (no crop/upsample)."""
    tx_channel = np.zeros(bmap.cells.shape, dtype=np.uint8)
    tx_channel[tx.y, tx.x] = 255
    if tx_dilation > 0:
        y0, y1 = max(0, tx.y - tx_dilation), tx.y + tx_dilation + 1
        x0, x1 = max(0, tx.x - tx_dilation), tx.x + tx_dilation + 1
        tx_channel[y0:y1, x0:x1] = np.maximum(tx_channel[y0:y1, x0:x1], 254)
        tx_channel[tx.y, tx.x] = 255
    return GraySample(
        map_channel=bmap.cells.copy(),
        tx_channel=tx_channel,
        target=grid_to_gray(grid),
        scene_id=scene_id or f"{bmap.map_id}_t{tx.x}_{tx.y}",
        map_id=bmap.map_id,
        meters_per_pixel=bmap.meters_per_pixel,
    )


def crop_augment(
    bmap: BuildingMap,
    grid: PathlossGrid,
    tx: TxLocation,
    crop_size: int = 64,
    out_size: int = 256,
    stride: int = 16,
    scene_id: str | None = None,
) -> list[GraySample]:
    """Slide a crop window anchored on the TX and upsample each crop.

    Window origins step by `stride` over the positions that keep the TX
    inside; windows without the TX never materialize. Crops are upsampled
    bilinearly (map and dBm field alike) and the TX pixel is re-stamped at
    its mapped coordinates. The emitted pixel scale shrinks by
    crop_size/out_size.
    """
    n = bmap.size
    if crop_size > n:
        raise ValueError("crop_size larger than the scene")
    scene_id = scene_id or f"{bmap.map_id}_t{tx.x}_{tx.y}"
    scale = out_size / crop_size

    origins_x = _tx_window_origins(tx.x, crop_size, stride, n)
    origins_y = _tx_window_origins(tx.y, crop_size, stride, n)
    samples = []
    crop_index = 0
    for oy in origins_y:
        for ox in origins_x:
            cells = bmap.cells[oy : oy + crop_size, ox : ox + crop_size]
            vals = grid.values[oy : oy + crop_size, ox : ox + crop_size]

            map_up = np.clip(np.rint(_bilinear_resize(cells, out_size)), 0, 255).astype(np.uint8)
            dbm_up = _bilinear_resize(vals, out_size)
            building = map_up == geo.BUILDING
            target = to_gray(dbm_up)
            target[building] = BUILDING_GRAY

            # map the TX through the same geometric transform, then re-stamp
            ux = int(np.clip(round((tx.x - ox + 0.5) * scale - 0.5), 0, out_size - 1))
            uy = int(np.clip(round((tx.y - oy + 0.5) * scale - 0.5), 0, out_size - 1))
            if building[uy, ux]:
                free = np.argwhere(~building)
                j = np.argmin(((free - [uy, ux]) ** 2).sum(axis=1))
                uy, ux = (int(v) for v in free[j])
            tx_channel = np.zeros((out_size, out_size), dtype=np.uint8)
            tx_channel[uy, ux] = 255

            samples.append(
                GraySample(
                    map_channel=map_up,
                    tx_channel=tx_channel,
                    target=target,
                    scene_id=scene_id,
                    map_id=bmap.map_id,
                    meters_per_pixel=bmap.meters_per_pixel / scale,
                    crop_index=crop_index,
                )
            )
            crop_index += 1
    return samples


def _tx_window_origins(t: int, crop: int, stride: int, n: int) -> list[int]:
    lo = max(0, t - crop + 1)
    hi = min(t, n - crop)
    return list(range(lo, hi + 1, stride))


_ROTATIONS = {"rot90": 1, "rot180": 2, "rot270": 3}
_FLIPS = ("fliph", "flipv", "flipd")


def _transform(a: np.ndarray, tag: str) -> np.ndarray:
    if tag in _ROTATIONS:
        return np.rot90(a, _ROTATIONS[tag]).copy()
    if tag == "fliph":
        return a[:, ::-1].copy()
    if tag == "flipv":
        return a[::-1, :].copy()
    if tag == "flipd":
        return a.T.copy()
    raise ValueError(f"unknown transform {tag!r}")


def rotate_flip_augment(
    samples: list[GraySample],
    rotations: bool = False,
    flips: bool = False,
) -> list[GraySample]:
    """Expand samples by 90-degree rotations (x4) and/or flips (x4).

    Each mode emits the original plus three transformed copies; all channels
    transform together so per-sample invariants survive.
    """
    out = list(samples)
    if rotations:
        out = [
            s
            for sample in out
            for s in ([sample] + [_apply_aug(sample, t) for t in _ROTATIONS])
        ]
    if flips:
        out = [
            s
            for sample in out
            for s in ([sample] + [_apply_aug(sample, t) for t in _FLIPS])
        ]
    return out


def _apply_aug(s: GraySample, tag: str) -> GraySample:
    joined = f"{s.aug_tag}+{tag}" if s.aug_tag else tag
    return replace(
        s,
        map_channel=_transform(s.map_channel, tag),
        tx_channel=_transform(s.tx_channel, tag),
        target=_transform(s.target, tag),
        aug_tag=joined,
    )


@dataclass
class SampleRecord:
    """Manifest entry pointing at one sample on disk."""

    sample_id: str
    scene_id: str
    map_id: str
    meters_per_pixel: float
    tx_x: int
    tx_y: int
    crop_index: int = 0
    aug_tag: str = ""

    def paths(self, root: Path) -> dict[str, Path]:
        base = root / "samples" / self.sample_id
        return {
            "map": base.with_name(base.name + "_map.png"),
            "tx": base.with_name(base.name + "_tx.png"),
            "target": base.with_name(base.name + "_target.png"),
            "meta": base.with_name(base.name + ".json"),
        }


@dataclass
class DatasetManifest:
    samples: list[SampleRecord] = field(default_factory=list)
    split: dict[str, str] = field(default_factory=dict)
    normalization: dict[str, float] = field(
        default_factory=lambda: {"min_dbm": GRAY_MIN_DBM, "max_dbm": GRAY_MAX_DBM}
    )
    meta: dict = field(default_factory=dict)

    def records(self, split: str | None = None) -> list[SampleRecord]:
        if split is None:
            return list(self.samples)
        return [r for r in self.samples if self.split.get(r.map_id) == split]

    def map_ids(self) -> list[str]:
        seen = dict.fromkeys(r.map_id for r in self.samples)
        return list(seen)


def split_by_map(
    manifest: DatasetManifest,
    train_fraction: float = 0.9,
    seed: int = 0,
) -> DatasetManifest:
    """Assign every geographic map (and all its samples) to TRAIN or VAL.

    Maps are shuffled deterministically and accumulated into TRAIN until the
    sample fraction reaches train_fraction; both splits keep at least one map.
    """
    map_ids = manifest.map_ids()
    if len(map_ids) < 2:
        raise ValueError("need samples from at least 2 distinct maps to split")
    counts = {m: 0 for m in map_ids}
    for r in manifest.samples:
        counts[r.map_id] += 1
    total = len(manifest.samples)
    order = list(np.random.default_rng(seed).permutation(map_ids))
    target = train_fraction * total
    split: dict[str, str] = {}
    acc = 0
    for m in order:
        if acc < target and len(order) - len(split) > 1:
            split[m] = TRAIN
            acc += counts[m]
        else:
            split[m] = VAL
    if TRAIN not in split.values():
        split[order[0]] = TRAIN
    if VAL not in split.values():
        split[order[-1]] = VAL
    manifest.split = split
    return manifest


def save_sample(sample: GraySample, root: str | Path) -> SampleRecord:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    rec = SampleRecord(
        sample_id=sample.sample_id,
        scene_id=sample.scene_id,
        map_id=sample.map_id,
        meters_per_pixel=sample.meters_per_pixel,
        tx_x=sample.tx_xy[0],
        tx_y=sample.tx_xy[1],
        crop_index=sample.crop_index,
        aug_tag=sample.aug_tag,
    )
    paths = rec.paths(root)
    Image.fromarray(sample.map_channel, mode="L").save(paths["map"])
    Image.fromarray(sample.tx_channel, mode="L").save(paths["tx"])
    Image.fromarray(sample.target, mode="L").save(paths["target"])
    meta = {
        "sample_id": rec.sample_id,
        "scene_id": rec.scene_id,
        "map_id": rec.map_id,
        "meters_per_pixel": rec.meters_per_pixel,
        "tx": {"x": rec.tx_x, "y": rec.tx_y},
        "crop_index": rec.crop_index,
        "aug_tag": rec.aug_tag,
    }
    paths["meta"].write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return rec


def load_sample(rec: SampleRecord, root: str | Path) -> GraySample:
    paths = rec.paths(Path(root))
    return GraySample(
        map_channel=np.asarray(Image.open(paths["map"]), dtype=np.uint8),
        tx_channel=np.asarray(Image.open(paths["tx"]), dtype=np.uint8),
        target=np.asarray(Image.open(paths["target"]), dtype=np.uint8),
        scene_id=rec.scene_id,
        map_id=rec.map_id,
        meters_per_pixel=rec.meters_per_pixel,
        crop_index=rec.crop_index,
        aug_tag=rec.aug_tag,
    )


def save_manifest(manifest: DatasetManifest, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    payload = {
        "samples": [vars(r) for r in manifest.samples],
        "split": manifest.split,
        "normalization": manifest.normalization,
        "meta": manifest.meta,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    return path


def load_manifest(root: str | Path) -> DatasetManifest:
    payload = json.loads((Path(root) / "manifest.json").read_text())
    return DatasetManifest(
        samples=[SampleRecord(**r) for r in payload["samples"]],
        split=payload["split"],
        normalization=payload["normalization"],
        meta=payload.get("meta", {}),
    )
