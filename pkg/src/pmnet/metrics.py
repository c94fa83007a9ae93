"""Evaluation metrics, model comparison reports, and raster rendering.

Predictions and targets are normalized gray maps in [0, 1] (gray/255).
A pixel counts as building when its value falls below 0.5/255, i.e. when it
would quantize to gray 0.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from pmnet import dataset as ds, geo
from pmnet.dataset import GraySample
from pmnet.geo import BuildingMap, TxLocation

BUILDING_THRESHOLD = 0.5 / 255.0


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def rmse(pred, gt) -> float:
    """Root mean squared error over all pixels of one normalized map."""
    pred, gt = _check_pair(pred, gt)
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def roi_segmentation_error(pred, gt) -> float:
    """Misclassified pixels (either direction) per ground-truth building pixel."""
    pred, gt = _check_pair(pred, gt)
    pred_b = pred < BUILDING_THRESHOLD
    gt_b = gt < BUILDING_THRESHOLD
    errors = int((pred_b != gt_b).sum())
    denom = int(gt_b.sum())
    if denom == 0:
        if errors == 0:
            return 0.0
        warnings.warn("RoI error undefined: ground truth has no building pixels")
        return float("nan")
    return errors / denom


def channel_prediction_error(pred, gt, intersection: bool = True) -> float:
    """RMSE in dBm over RoI pixels, after undoing the gray normalization.

    By default only pixels classified RoI in both maps enter; set
    intersection=False to restrict by the ground-truth mask alone.
    """
    pred, gt = _check_pair(pred, gt)
    mask = gt >= BUILDING_THRESHOLD
    if intersection:
        mask &= pred >= BUILDING_THRESHOLD
    if not mask.any():
        warnings.warn("channel prediction error undefined: empty RoI overlap")
        return float("nan")
    p_dbm = pred[mask] * 255.0 - 255.0
    g_dbm = gt[mask] * 255.0 - 255.0
    return float(np.sqrt(np.mean((p_dbm - g_dbm) ** 2)))


@dataclass
class MetricReport:
    model_id: str
    dataset_id: str
    rmse: float
    roi_segmentation_err: float
    channel_prediction_err_db: float
    rmse_gray: float
    n_samples: int
    latency_ms_p50: float
    latency_ms_p95: float

    def to_json(self) -> str:
        payload = {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "rmse": self.rmse,
            "roi_err": self.roi_segmentation_err,
            "chan_err_db": self.channel_prediction_err_db,
            "rmse_gray": self.rmse_gray,
            "latency_ms": {"p50": self.latency_ms_p50, "p95": self.latency_ms_p95},
            "n": self.n_samples,
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k, v in asdict(self).items():
                writer.writerow([k, v])


def pmnet_predictor(model):
    """Wrap a trained network as a per-sample predictor."""
    import torch

    model.eval()

    def predict(sample: GraySample) -> np.ndarray:
        x = np.stack(
            [
                sample.map_channel.astype(np.float32) / 255.0,
                sample.tx_channel.astype(np.float32) / 255.0,
            ]
        )
        with torch.no_grad():
            out = model(torch.from_numpy(x[None]))
        return out[0, 0].numpy().astype(np.float64)

    return predict


def baseline_predictor(name: str, cfg=None, rl=None):
    """Analytic per-sample predictor backed by a field generator."""
    from pmnet import propagation as prop

    if name not in ("3gpp", "raylaunch"):
        raise ValueError(f"unknown baseline {name!r}")

    def predict(sample: GraySample) -> np.ndarray:
        cells = geo.classify_gray(sample.map_channel)
        bmap = BuildingMap(
            cells=cells, meters_per_pixel=sample.meters_per_pixel, map_id=sample.map_id
        )
        tx_x, tx_y = sample.tx_xy
        if cells[tx_y, tx_x] != geo.FREE:
            ys, xs = np.nonzero(cells == geo.FREE)
            j = np.argmin((xs - tx_x) ** 2 + (ys - tx_y) ** 2)
            tx_x, tx_y = int(xs[j]), int(ys[j])
        tx = TxLocation(tx_x, tx_y)
        if name == "3gpp":
            grid = prop.pathloss_map_3gpp(bmap, tx, cfg)
        else:
            grid = prop.ray_launch(bmap, tx, cfg, rl)
        return ds.grid_to_gray(grid).astype(np.float64) / 255.0

    return predict


def resolve_predictor(model_or_name, model_id: str | None = None):
    """Accept a network, a baseline name, or a checkpoint path."""
    if isinstance(model_or_name, str):
        if model_or_name in ("3gpp", "raylaunch"):
            return baseline_predictor(model_or_name), model_or_name
        from pmnet.model import load_checkpoint

        net, _ = load_checkpoint(model_or_name)
        return pmnet_predictor(net), model_id or Path(model_or_name).stem
    if callable(model_or_name) and not hasattr(model_or_name, "parameters"):
        return model_or_name, model_id or "custom"
    return pmnet_predictor(model_or_name), model_id or "pmnet"


def evaluate_model(
    model_or_name,
    manifest: ds.DatasetManifest,
    root: str | Path,
    split: str = ds.VAL,
    model_id: str | None = None,
    dataset_id: str | None = None,
) -> MetricReport:
    """Run a predictor over one split and aggregate the three task metrics."""
    records = manifest.records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    predictor, resolved_id = resolve_predictor(model_or_name, model_id)

    rmses, roi_errs, chan_errs, lat_ms = [], [], [], []
    for rec in records:
        sample = ds.load_sample(rec, root)
        gt = sample.target.astype(np.float64) / 255.0
        t0 = time.perf_counter()
        pred = predictor(sample)
        lat_ms.append((time.perf_counter() - t0) * 1e3)
        rmses.append(rmse(pred, gt))
        roi_errs.append(roi_segmentation_error(pred, gt))
        chan_errs.append(channel_prediction_error(pred, gt))

    return MetricReport(
        model_id=resolved_id,
        dataset_id=dataset_id or manifest.meta.get("dataset_id", str(root)),
        rmse=float(np.mean(rmses)),
        roi_segmentation_err=float(np.nanmean(roi_errs)),
        channel_prediction_err_db=float(np.nanmean(chan_errs)),
        rmse_gray=float(np.mean(rmses)) * 255.0,
        n_samples=len(records),
        latency_ms_p50=float(np.percentile(lat_ms, 50)),
        latency_ms_p95=float(np.percentile(lat_ms, 95)),
    )


# ------------------------------------------------------------------ rendering

def _to_gray_u8(grid) -> np.ndarray:
    a = np.asarray(grid)
    if a.dtype == np.uint8:
        return a
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def _stamp_tx(img: np.ndarray, tx: tuple[int, int], value: int) -> None:
    x, y = tx
    h, w = img.shape[:2]
    for d in range(-3, 4):
        if 0 <= y + d < h:
            img[y + d, x] = value
        if 0 <= x + d < w:
            img[y, x + d] = value


def render_heatmap(
    grid,
    tx: tuple[int, int] | None = None,
    compare=None,
    mode: str = "gray",
) -> bytes:
    """Render a grid (or pred/gt pair) as PNG bytes.

    mode="gray" draws the map itself; mode="diff" draws (grid - compare)
    around a neutral midtone. With compare set and mode="gray", the two maps
    are laid side by side.
    """
    a = _to_gray_u8(grid)
    if mode == "diff":
        if compare is None:
            raise ValueError("diff mode needs a comparison grid")
        b = _to_gray_u8(compare)
        diff = a.astype(np.int16) - b.astype(np.int16)
        img = np.clip(128 + diff, 0, 255).astype(np.uint8)
    elif compare is not None:
        b = _to_gray_u8(compare)
        sep = np.full((a.shape[0], 2), 64, dtype=np.uint8)
        img = np.hstack([a, sep, b])
    else:
        img = a.copy()
    if tx is not None:
        _stamp_tx(img, tx, 255 if mode == "diff" else 254)
    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()
