"""Command-line entry points for the workbench pipelines.

Every sub-command drives exactly one module pipeline and writes its
effective configuration next to its outputs. Domain errors exit with
status 1; usage errors with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path


def _family_from_args(args) -> "ScenarioFamily":
    from pmnet.workbench import ScenarioFamily

    return ScenarioFamily(
        name=args.family,
        size=args.size,
        density=args.density,
        meters_per_pixel=args.mpp,
        foliage_fraction=args.foliage,
        generator=args.generator,
        fc_ghz=args.fc,
    )


def _add_family_args(p):
    p.add_argument("--family", default="desk", help="scenario family name")
    p.add_argument("--size", type=int, default=128, help="map size in pixels")
    p.add_argument("--density", type=float, default=0.25, help="building density")
    p.add_argument("--mpp", type=float, default=1.0, help="meters per pixel")
    p.add_argument("--foliage", type=float, default=0.0, help="foliage fraction")
    p.add_argument("--generator", choices=["raylaunch", "3gpp"], default="raylaunch")
    p.add_argument("--fc", type=float, default=3.0, help="carrier frequency in GHz")


def _add_train_args(p):
    p.add_argument("--profile", choices=["desk", "paper"], default="desk")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr-gamma", type=float, default=0.5)
    p.add_argument("--lr-step-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-every", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None)


def _train_config(args) -> "TrainConfig":
    from pmnet.train import TrainConfig

    return TrainConfig(
        lr_initial=args.lr,
        lr_gamma=args.lr_gamma,
        lr_step_epochs=args.lr_step_epochs,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        probe_every=args.probe_every,
        max_steps=args.max_steps,
    )


def _model_config(profile: str) -> "PmnetConfig":
    from pmnet.model import PmnetConfig

    return PmnetConfig.desk() if profile == "desk" else PmnetConfig.paper()


def cmd_generate(args) -> int:
    from pmnet.workbench import build_dataset

    family = _family_from_args(args)
    manifest = build_dataset(
        args.out,
        family,
        n_scenes=args.maps,
        seed=args.seed,
        train_fraction=args.train_fraction,
        crop=args.crop,
        rotations=args.rotations,
        flips=args.flips,
    )
    print(f"wrote {len(manifest.samples)} samples from {args.maps} scenes to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    from pmnet import dataset as ds, geo, propagation as prop

    root = Path(args.root)
    out = Path(args.out)
    manifest = ds.DatasetManifest()
    map_paths = sorted((root / "maps").glob("*.png"))
    if not map_paths:
        print(f"no maps under {root}/maps", file=sys.stderr)
        return 1
    for map_path in map_paths:
        bmap = geo.load_map(map_path)
        grid = prop.load_grid(root / "grids" / bmap.map_id)
        tx = grid.tx
        if args.crop:
            samples = ds.crop_augment(
                bmap, grid, tx, crop_size=args.crop_size, out_size=args.out_size,
                stride=args.stride,
            )
        else:
            samples = [ds.scene_to_sample(bmap, grid, tx)]
        samples = ds.rotate_flip_augment(samples, rotations=args.rotations, flips=args.flips)
        for s in samples:
            manifest.samples.append(ds.save_sample(s, out))
    ds.split_by_map(manifest, train_fraction=args.train_fraction, seed=args.seed)
    manifest.meta = {"source_root": str(root), "augment": {
        "crop": args.crop, "rotations": args.rotations, "flips": args.flips}}
    ds.save_manifest(manifest, out)
    print(f"wrote {len(manifest.samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from pmnet import dataset as ds
    from pmnet.model import build_pmnet
    from pmnet.train import TrainData, train

    manifest = ds.load_manifest(args.data)
    data = TrainData.from_manifest(manifest, args.data)
    model = build_pmnet(_model_config(args.profile), seed=args.seed)
    run = train(model, data, _train_config(args), run_dir=args.out)
    print(
        f"trained {run.total_steps} steps; best val MSE {run.best_val_mse:.5f} "
        f"(epoch {run.best_epoch}); run dir {args.out}"
    )
    return 0


def cmd_finetune(args) -> int:
    from pmnet import dataset as ds
    from pmnet.train import TrainData, finetune

    manifest = ds.load_manifest(args.data)
    data = TrainData.from_manifest(manifest, args.data)
    pretrained = None if args.pretrained in (None, "none") else args.pretrained
    model_cfg = _model_config(args.profile) if pretrained is None else None
    _, run = finetune(pretrained, data, args.fraction, _train_config(args),
                      model_cfg=model_cfg, run_dir=args.out)
    print(
        f"fine-tuned {run.total_steps} steps on fraction {args.fraction}; "
        f"final val RMSE {run.final_val_rmse:.4f}; run dir {args.out}"
    )
    return 0


def cmd_sweep(args) -> int:
    from pmnet import dataset as ds
    from pmnet.train import TrainData, data_fraction_sweep

    manifest = ds.load_manifest(args.data)
    data = TrainData.from_manifest(manifest, args.data)
    fractions = [float(f) for f in args.fractions.split(",")]
    pretrained = None if args.pretrained in (None, "none") else args.pretrained
    model_cfg = _model_config(args.profile) if pretrained is None else None
    rows = data_fraction_sweep(pretrained, data, fractions, _train_config(args),
                               model_cfg=model_cfg, out_dir=args.out)
    for r in rows:
        print(f"fraction {r['fraction']:.2f}: final val RMSE {r['final_val_rmse']:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from pmnet import dataset as ds, metrics

    manifest = ds.load_manifest(args.data)
    split = args.split.upper()
    report = metrics.evaluate_model(args.model, manifest, args.data, split=split)
    out = Path(args.out or (Path(args.data) / "report.json"))
    report.write(out)
    print(report.to_json(), end="")
    print(f"report written to {out}")
    return 0


def cmd_predict(args) -> int:
    from pmnet import geo
    from pmnet.geo import TxLocation
    from pmnet.workbench import UNITS_METADATA, png_bytes, predict_pathloss

    if args.map:
        bmap = geo.load_map(args.map)
    elif args.data and args.map_id:
        bmap = geo.load_map(Path(args.data) / "maps" / f"{args.map_id}.png")
    else:
        print("predict needs --map or (--data and --map-id)", file=sys.stderr)
        return 2
    x, y = (int(v) for v in args.tx.split(","))
    gray, roi = predict_pathloss(bmap, TxLocation(x, y), args.model)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(str(prefix) + "_pathloss.png").write_bytes(png_bytes(gray))
    Path(str(prefix) + "_roi.png").write_bytes(png_bytes(roi))
    meta = {
        "model_id": args.model,
        "map_id": bmap.map_id,
        "tx": {"x": x, "y": y},
        "units": UNITS_METADATA,
    }
    Path(str(prefix) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(f"wrote {prefix}_pathloss.png")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from pmnet.server import create_app

    app = create_app(registry_dir=args.registry, dataset_root=args.data)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmnet", description="pathloss-map prediction workbench"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate scenes and build a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--maps", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--crop", action="store_true")
    p.add_argument("--rotations", action="store_true")
    p.add_argument("--flips", action="store_true")
    _add_family_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("preprocess", help="rebuild samples from stored scenes")
    p.add_argument("--root", required=True, help="dataset root holding maps/ and grids/")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--crop", action="store_true")
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--out-size", type=int, default=256)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--rotations", action="store_true")
    p.add_argument("--flips", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrained", default="none", help="checkpoint path or 'none'")
    p.add_argument("--fraction", type=float, default=1.0)
    _add_train_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="data-fraction sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pretrained", default="none")
    p.add_argument("--fractions", default="0.1,0.2,0.5,0.9")
    _add_train_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="evaluate a model or baseline on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="3gpp, raylaunch, or checkpoint path")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict one pathloss map")
    p.add_argument("--map", default=None, help="map PNG path (with JSON sidecar)")
    p.add_argument("--data", default=None)
    p.add_argument("--map-id", default=None)
    p.add_argument("--tx", required=True, help="x,y pixel coordinates")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="run the coverage-explorer HTTP service")
    p.add_argument("--registry", default=None, help="directory of checkpoints")
    p.add_argument("--data", default=None, help="dataset root for /maps")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
