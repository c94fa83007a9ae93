"""HTTP inference service backing the coverage explorer.

Endpoints: POST /predict, GET /maps, GET /models, GET /healthz. Models and
maps are loaded read-only at startup; prediction runs against immutable
parameters, so concurrent requests are safe.
"""

from __future__ import annotations

import base64
import binascii
import io
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from pmnet import geo, workbench
from pmnet.geo import BuildingMap, TxLocation

BASELINE_MODELS = ("3gpp", "raylaunch")
MAX_INLINE_SIZE = 256


class TxPixel(BaseModel):
    x: int
    y: int


class PredictRequest(BaseModel):
    tx: TxPixel
    model_id: str
    map_id: str | None = None
    map_png_b64: str | None = None
    meters_per_pixel: float | None = Field(default=None, gt=0)


class PredictResponse(BaseModel):
    model_id: str
    map_id: str | None
    tx: TxPixel
    latency_ms: float
    pathloss_png_b64: str
    roi_png_b64: str
    units: dict


class ModelRegistry:
    """Checkpoint files in one directory plus the two analytic baselines."""

    def __init__(self, registry_dir: str | Path | None):
        self.registry_dir = Path(registry_dir) if registry_dir else None
        self._models: dict[str, object] = {}
        self.ready = False

    def load(self) -> None:
        from pmnet.model import load_checkpoint

        self._models = {}
        if self.registry_dir and self.registry_dir.is_dir():
            for path in sorted(self.registry_dir.glob("*.pt")):
                net, meta = load_checkpoint(path)
                self._models[path.stem] = net
        self.ready = True

    def ids(self) -> list[str]:
        return list(BASELINE_MODELS) + sorted(self._models)

    def resolve(self, model_id: str):
        if model_id in BASELINE_MODELS:
            return model_id
        if model_id in self._models:
            return self._models[model_id]
        raise KeyError(model_id)

    def describe(self) -> list[dict]:
        out = [{"model_id": m, "kind": "baseline"} for m in BASELINE_MODELS]
        for name, net in sorted(self._models.items()):
            out.append(
                {
                    "model_id": name,
                    "kind": "checkpoint",
                    "input_size": net.cfg.input_size,
                    "parameters": net.parameter_count(),
                }
            )
        return out


def _decode_inline_map(req: PredictRequest) -> BuildingMap:
    if req.meters_per_pixel is None:
        raise HTTPException(400, "inline maps need meters_per_pixel")
    try:
        raw = base64.b64decode(req.map_png_b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("L")
    except (binascii.Error, OSError) as exc:
        raise HTTPException(400, f"invalid inline map: {exc}") from exc
    if img.width != img.height or img.width > MAX_INLINE_SIZE:
        raise HTTPException(400, f"inline maps must be square and <= {MAX_INLINE_SIZE}px")
    cells = geo.classify_gray(np.asarray(img, dtype=np.uint8))
    try:
        return BuildingMap(
            cells=cells, meters_per_pixel=req.meters_per_pixel, map_id="inline"
        )
    except ValueError as exc:
        raise HTTPException(400, str(exc)) from exc


def create_app(
    registry_dir: str | Path | None = None,
    dataset_root: str | Path | None = None,
    defer_loading: bool = False,
) -> FastAPI:
    app = FastAPI(title="pathloss coverage service")
    registry = ModelRegistry(registry_dir)
    maps_dir = Path(dataset_root) / "maps" if dataset_root else None
    app.state.registry = registry

    if not defer_loading:
        registry.load()

    @app.on_event("startup")
    def _load():
        if not registry.ready:
            registry.load()

    def _require_ready():
        if not registry.ready:
            raise HTTPException(503, "model registry still loading")

    def _load_map(map_id: str) -> BuildingMap:
        if maps_dir is None:
            raise HTTPException(404, f"unknown map {map_id!r}")
        path = maps_dir / f"{map_id}.png"
        if not path.exists():
            raise HTTPException(404, f"unknown map {map_id!r}")
        return geo.load_map(path)

    @app.get("/healthz")
    def healthz():
        _require_ready()
        return {"status": "ok", "models": registry.ids()}

    @app.get("/models")
    def models():
        _require_ready()
        return {"models": registry.describe()}

    @app.get("/maps")
    def maps():
        _require_ready()
        out = []
        if maps_dir is not None and maps_dir.is_dir():
            for path in sorted(maps_dir.glob("*.png")):
                bmap = geo.load_map(path)
                out.append(
                    {
                        "map_id": bmap.map_id,
                        "size": bmap.size,
                        "meters_per_pixel": bmap.meters_per_pixel,
                        "png_b64": base64.b64encode(path.read_bytes()).decode(),
                    }
                )
        return {"maps": out}

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        _require_ready()
        try:
            spec = registry.resolve(req.model_id)
        except KeyError:
            raise HTTPException(404, f"unknown model {req.model_id!r}")
        if req.map_png_b64 is not None:
            bmap = _decode_inline_map(req)
        elif req.map_id is not None:
            bmap = _load_map(req.map_id)
        else:
            raise HTTPException(400, "request needs map_id or map_png_b64")

        tx = TxLocation(req.tx.x, req.tx.y)
        t0 = time.perf_counter()
        try:
            gray, roi = workbench.predict_pathloss(bmap, tx, spec)
        except ValueError as exc:
            raise HTTPException(400, str(exc)) from exc
        latency_ms = (time.perf_counter() - t0) * 1e3

        return PredictResponse(
            model_id=req.model_id,
            map_id=bmap.map_id if req.map_id is not None else None,
            tx=req.tx,
            latency_ms=latency_ms,
            pathloss_png_b64=base64.b64encode(workbench.png_bytes(gray)).decode(),
            roi_png_b64=base64.b64encode(workbench.png_bytes(roi)).decode(),
            units=workbench.UNITS_METADATA,
        )

    return app
