"""Ground-truth pathloss generators.

Two per-pixel field generators over a BuildingMap:

* `pathloss_map_3gpp` — the urban-micro two-branch pathloss model with the
  LoS/NLoS condition read deterministically off the map.
* `ray_launch` — a simplified 2D specular ray launcher whose per-pixel power
  is a sum over distinct arrival paths; deterministic, site-specific, and
  cheap enough to stand in for a full ray tracer.

Pathloss PL is returned in dB; received power is P_RX = p_tx_dbm - PL, so at
the default p_tx = 0 dBm the dBm field equals the (negated) path gain in dB.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from pmnet import geo
from pmnet.geo import BuildingMap, LinkGeometry, TxLocation

SPEED_OF_LIGHT = 3.0e8

#: Scalar sentinel for links below the 10 m model validity bound. Treated as
#: "strongest possible signal": P_RX = p_tx - (-inf) saturates the gray scale
#: at 255. Grid generators write the near-field pixels as 0 dBm directly.
NEAR_FIELD = float("-inf")

#: Power floor aligned with the gray-scale minimum so clamping and
#: quantization commute.
FLOOR_DBM = -254.0


@dataclass(frozen=True)
class PropagationConfig:
    fc_ghz: float = 3.0
    h_bs: float = 10.0
    h_ut: float = 1.5
    p_tx_dbm: float = 0.0
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not 0.5 <= self.fc_ghz <= 100.0:
            raise ValueError("fc_ghz outside the 0.5-100 GHz validity range")


@dataclass(frozen=True)
class AlphaBetaParams:
    alpha: float
    beta: float
    sigma_s: float = 0.0

    def __post_init__(self):
        if self.sigma_s < 0:
            raise ValueError("sigma_s must be >= 0")


@dataclass(frozen=True)
class RayLaunchConfig:
    n_rays: int = 720
    max_reflections: int = 3
    reflection_loss_db: float = 6.0
    foliage_loss_db_per_m: float = 0.5
    rx_capture_radius: float = 0.5
    floor_dbm: float = FLOOR_DBM

    def __post_init__(self):
        if self.n_rays < 8:
            raise ValueError("n_rays must be >= 8")


@dataclass(frozen=True)
class PathlossGrid:
    """Per-pixel received power in dBm plus the region-of-interest mask."""

    values: np.ndarray
    roi_mask: np.ndarray
    map_id: str
    tx: TxLocation

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        roi = np.ascontiguousarray(self.roi_mask, dtype=bool)
        if values.shape != roi.shape:
            raise ValueError("values and roi_mask shapes differ")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "roi_mask", roi)


def breakpoint_distance(cfg: PropagationConfig) -> float:
    """Two-slope breakpoint distance in meters (carrier frequency in Hz)."""
    return 2.0 * math.pi * cfg.h_bs * cfg.h_ut * (cfg.fc_ghz * 1.0e9) / cfg.c


def pl_alpha_beta(d: float, p: AlphaBetaParams) -> float:
    """Classical alpha-beta pathloss in dB; shadow fading is omitted."""
    if d <= 0:
        raise ValueError("distance must be positive")
    return 10.0 * p.alpha * math.log10(d) + p.beta


def _pl1(d_3d, fc_ghz):
    return 32.4 + 21.0 * np.log10(d_3d) + 20.0 * np.log10(fc_ghz)


def _pl2(d_3d, fc_ghz, d_bp, h_bs, h_ut):
    return (
        32.4
        + 40.0 * np.log10(d_3d)
        + 20.0 * np.log10(fc_ghz)
        - 9.5 * np.log10(d_bp**2 + (h_bs - h_ut) ** 2)
    )


def _pl3(d_3d, fc_ghz, h_ut):
    return 22.4 + 35.3 * np.log10(d_3d) + 21.3 * np.log10(fc_ghz) - 0.6 * (h_ut - 1.5)


def pathloss_umi(geom: LinkGeometry, cfg: PropagationConfig) -> float:
    """Urban-micro pathloss in dB for one link.

    LoS links follow the two-slope model split at the breakpoint distance;
    NLoS links take max(LoS value, NLoS formula). Links under 10 m return
    the NEAR_FIELD sentinel (callers render those pixels as gray 255).
    """
    if geom.d_2d > 5000.0:
        raise ValueError("d_2d beyond the 5 km model validity range")
    if geom.d_2d < 10.0:
        return NEAR_FIELD
    d_bp = breakpoint_distance(cfg)
    if geom.d_2d <= d_bp:
        pl_los = _pl1(geom.d_3d, cfg.fc_ghz)
    else:
        pl_los = _pl2(geom.d_3d, cfg.fc_ghz, d_bp, cfg.h_bs, cfg.h_ut)
    if geom.los:
        return float(pl_los)
    return float(max(pl_los, _pl3(geom.d_3d, cfg.fc_ghz, cfg.h_ut)))


def pathloss_map_3gpp(
    bmap: BuildingMap,
    tx: TxLocation,
    cfg: PropagationConfig | None = None,
    h_ut: float | None = None,
) -> PathlossGrid:
    """Per-pixel received power from the urban-micro model with map-derived LoS.

    Near-field pixels (d_2d < 10 m) are set to 0 dBm; building pixels are
    outside the RoI and are written at the power floor.
    """
    cfg = cfg or PropagationConfig()
    h_ut = cfg.h_ut if h_ut is None else h_ut
    if not bmap.is_free(tx.x, tx.y):
        raise ValueError("tx must be on a FREE cell")

    n = bmap.size
    ys, xs = np.mgrid[0:n, 0:n]
    d_2d = np.hypot(xs - tx.x, ys - tx.y) * bmap.meters_per_pixel
    d_3d = np.hypot(d_2d, tx.h_bs - h_ut)
    d_bp = breakpoint_distance(cfg)

    with np.errstate(divide="ignore", invalid="ignore"):
        pl_los = np.where(
            d_2d <= d_bp,
            _pl1(d_3d, cfg.fc_ghz),
            _pl2(d_3d, cfg.fc_ghz, d_bp, cfg.h_bs, cfg.h_ut),
        )
        pl_nlos = np.maximum(pl_los, _pl3(d_3d, cfg.fc_ghz, cfg.h_ut))

    los = geo.los_mask(bmap, (tx.x, tx.y))
    pl = np.where(los, pl_los, pl_nlos)
    p_rx = cfg.p_tx_dbm - pl
    p_rx = np.maximum(p_rx, FLOOR_DBM)
    p_rx[d_2d < 10.0] = 0.0  # near-field rule: saturate to the gray maximum

    roi = bmap.cells != geo.BUILDING
    p_rx[~roi] = FLOOR_DBM
    return PathlossGrid(values=p_rx, roi_mask=roi, map_id=bmap.map_id, tx=tx)


def ray_launch(
    bmap: BuildingMap,
    tx: TxLocation,
    cfg: PropagationConfig | None = None,
    rl: RayLaunchConfig | None = None,
) -> PathlossGrid:
    """Per-pixel received power from a 2D specular ray launcher.

    Rays are launched uniformly in angle; power decays as free space over the
    unfolded path length, loses reflection_loss_db per bounce off building
    walls, and attenuates through foliage. Unreached pixels sit at the floor.
    """
    cfg = cfg or PropagationConfig()
    rl = rl or RayLaunchConfig()
    if rl.floor_dbm > cfg.p_tx_dbm:
        raise ValueError("floor_dbm must not exceed p_tx_dbm")
    if not bmap.is_free(tx.x, tx.y):
        raise ValueError("tx must be on a FREE cell")
    from pmnet._kernels import ray_launch_kernel

    values = ray_launch_kernel(
        bmap.cells,
        geo.BUILDING,
        geo.FOLIAGE,
        tx.x,
        tx.y,
        bmap.meters_per_pixel,
        cfg.p_tx_dbm,
        rl.n_rays,
        rl.max_reflections,
        rl.reflection_loss_db,
        rl.foliage_loss_db_per_m,
        rl.rx_capture_radius,
        rl.floor_dbm,
    )
    roi = bmap.cells != geo.BUILDING
    values = values.astype(np.float32)
    values[~roi] = rl.floor_dbm
    return PathlossGrid(values=values, roi_mask=roi, map_id=bmap.map_id, tx=tx)


def rays_for_coverage(bmap: BuildingMap, tx: TxLocation, rl: RayLaunchConfig) -> int:
    """Ray count guaranteeing every pixel lies within capture radius of a ray.

    Angular spacing at the farthest pixel must not exceed twice the capture
    radius; below that, distant pixels can fall between adjacent rays and
    read as unreached.
    """
    corners = [(0, 0), (0, bmap.size - 1), (bmap.size - 1, 0), (bmap.size - 1, bmap.size - 1)]
    r_max = max(math.hypot(cx - tx.x, cy - tx.y) for cx, cy in corners)
    needed = math.ceil(2.0 * math.pi * r_max / (2.0 * rl.rx_capture_radius) * 1.05)
    return max(rl.n_rays, needed)


def save_grid(grid: PathlossGrid, prefix: str | Path, meta: dict | None = None) -> None:
    """Write float32 dBm values, RoI mask, and JSON metadata under a prefix."""
    prefix = Path(prefix)
    np.save(str(prefix) + "_values.npy", grid.values)
    np.save(str(prefix) + "_roi.npy", grid.roi_mask)
    payload = {
        "map_id": grid.map_id,
        "tx": {"x": grid.tx.x, "y": grid.tx.y, "h_bs": grid.tx.h_bs},
    }
    if meta:
        payload.update(meta)
    Path(str(prefix) + ".json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_grid(prefix: str | Path) -> PathlossGrid:
    prefix = Path(prefix)
    values = np.load(str(prefix) + "_values.npy")
    roi = np.load(str(prefix) + "_roi.npy")
    meta = json.loads(Path(str(prefix) + ".json").read_text())
    tx = TxLocation(**meta["tx"])
    return PathlossGrid(values=values, roi_mask=roi, map_id=meta["map_id"], tx=tx)
