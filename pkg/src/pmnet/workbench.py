"""Dataset-building orchestration and the shared prediction code path.

A *scenario family* bundles the knobs that make scenes statistically alike
(size, density, pixel scale, ground-truth generator). Datasets are built one
scene per seed: map PNG + sidecar, float dBm grid + RoI mask, 8-bit sample
triple, and a manifest with a map-exclusive train/val split.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from pmnet import dataset as ds, geo, propagation as prop
from pmnet.geo import BuildingMap, TxLocation
from pmnet.propagation import PathlossGrid, PropagationConfig, RayLaunchConfig


@dataclass(frozen=True)
class ScenarioFamily:
    name: str = "desk"
    size: int = 128
    density: float = 0.25
    meters_per_pixel: float = 1.0
    foliage_fraction: float = 0.0
    block_size_range: tuple[int, int] = (8, 22)
    generator: str = "raylaunch"
    fc_ghz: float = 3.0
    h_bs: float = 10.0
    h_ut: float = 1.5
    p_tx_dbm: float = 0.0

    def __post_init__(self):
        if self.generator not in ("raylaunch", "3gpp"):
            raise ValueError("generator must be 'raylaunch' or '3gpp'")

    def propagation_config(self) -> PropagationConfig:
        return PropagationConfig(
            fc_ghz=self.fc_ghz, h_bs=self.h_bs, h_ut=self.h_ut, p_tx_dbm=self.p_tx_dbm
        )


def generate_scene(
    family: ScenarioFamily, seed: int
) -> tuple[BuildingMap, TxLocation, PathlossGrid]:
    """One deterministic scene: map, TX placement, and ground-truth field."""
    raw = geo.generate_map(
        seed=seed,
        size=family.size,
        density=family.density,
        block_size_range=family.block_size_range,
        foliage_fraction=family.foliage_fraction,
    )
    bmap = BuildingMap(
        cells=raw.cells,
        meters_per_pixel=family.meters_per_pixel,
        map_id=f"{family.name}-{raw.map_id}",
    )
    rng = np.random.default_rng(seed + 0x7A11)
    tx = TxLocation(*geo.random_free_cell(bmap, rng), h_bs=family.h_bs)
    cfg = family.propagation_config()
    if family.generator == "3gpp":
        grid = prop.pathloss_map_3gpp(bmap, tx, cfg)
    else:
        rl = RayLaunchConfig()
        rl = replace(rl, n_rays=prop.rays_for_coverage(bmap, tx, rl))
        grid = prop.ray_launch(bmap, tx, cfg, rl)
    return bmap, tx, grid


def build_dataset(
    root: str | Path,
    family: ScenarioFamily,
    n_scenes: int,
    seed: int = 0,
    train_fraction: float = 0.9,
    crop: bool = False,
    crop_size: int = 64,
    out_size: int = 256,
    crop_stride: int = 16,
    rotations: bool = False,
    flips: bool = False,
) -> ds.DatasetManifest:
    """Generate scenes and write a complete on-disk dataset with a manifest."""
    root = Path(root)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    (root / "grids").mkdir(parents=True, exist_ok=True)
    manifest = ds.DatasetManifest()
    manifest.meta = {
        "dataset_id": f"{family.name}-n{n_scenes}-s{seed}",
        "family": asdict(family),
        "n_scenes": n_scenes,
        "seed": seed,
        "augment": {"crop": crop, "rotations": rotations, "flips": flips},
    }
    for i in range(n_scenes):
        scene_seed = seed * 1_000_003 + i
        bmap, tx, grid = generate_scene(family, scene_seed)
        geo.save_map(
            bmap,
            root / "maps" / f"{bmap.map_id}.png",
            extra_meta={"seed": scene_seed, "generator_params": asdict(family)},
        )
        prop.save_grid(grid, root / "grids" / bmap.map_id, meta={"generator": family.generator})
        if crop:
            samples = ds.crop_augment(
                bmap, grid, tx, crop_size=crop_size, out_size=out_size, stride=crop_stride
            )
        else:
            samples = [ds.scene_to_sample(bmap, grid, tx)]
        samples = ds.rotate_flip_augment(samples, rotations=rotations, flips=flips)
        for s in samples:
            manifest.samples.append(ds.save_sample(s, root))
    ds.split_by_map(manifest, train_fraction=train_fraction, seed=seed)
    ds.save_manifest(manifest, root)
    return manifest


# ------------------------------------------------------------------ predict

UNITS_METADATA = {
    "gray_min_dbm": ds.GRAY_MIN_DBM,
    "gray_max_dbm": ds.GRAY_MAX_DBM,
    "db_per_gray": 1.0,
    "building_gray": ds.BUILDING_GRAY,
}


def png_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def predict_pathloss(
    bmap: BuildingMap,
    tx: TxLocation,
    model_spec,
    cfg: PropagationConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Predict a gray pathloss map for one map + TX with any backend.

    model_spec is "3gpp", "raylaunch", a checkpoint path, or a loaded network.
    Returns (gray uint8 HxW, roi uint8 HxW with 255 inside the RoI). This is
    the single code path behind both the CLI and the HTTP service.
    """
    if not bmap.in_bounds(tx.x, tx.y):
        raise ValueError("tx out of bounds")
    if not bmap.is_free(tx.x, tx.y):
        raise ValueError("tx must be on a FREE cell")
    roi = ((bmap.cells != geo.BUILDING) * 255).astype(np.uint8)

    if isinstance(model_spec, str) and model_spec in ("3gpp", "raylaunch"):
        cfg = cfg or PropagationConfig()
        if model_spec == "3gpp":
            grid = prop.pathloss_map_3gpp(bmap, tx, cfg)
        else:
            rl = RayLaunchConfig()
            rl = replace(rl, n_rays=prop.rays_for_coverage(bmap, tx, rl))
            grid = prop.ray_launch(bmap, tx, cfg, rl)
        return ds.grid_to_gray(grid), roi

    import torch

    from pmnet.model import PMNet, load_checkpoint

    if isinstance(model_spec, PMNet):
        net = model_spec
    else:
        net, _ = load_checkpoint(model_spec)
    if bmap.size != net.cfg.input_size:
        raise ValueError(
            f"model expects {net.cfg.input_size}px maps, got {bmap.size}px"
        )
    tx_channel = np.zeros_like(bmap.cells)
    tx_channel[tx.y, tx.x] = 255
    x = np.stack(
        [bmap.cells.astype(np.float32) / 255.0, tx_channel.astype(np.float32) / 255.0]
    )
    net.eval()
    with torch.no_grad():
        out = net(torch.from_numpy(x[None]))[0, 0].numpy()
    gray = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
    return gray, roi
