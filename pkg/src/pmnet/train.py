"""Training loop, checkpoint selection, and the transfer-learning harness.

Runs are deterministic for a fixed seed on a fixed device: data order comes
from a dedicated torch.Generator and validation is evaluated in a fixed
order. Fine-tuning restarts from a checkpoint with every layer trainable.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from pmnet import dataset as ds
from pmnet.model import PMNet, PmnetConfig, build_pmnet, load_checkpoint, save_checkpoint


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 5e-4
    lr_gamma: float = 0.5
    lr_step_epochs: int = 10
    batch_size: int = 16
    epochs: int = 50
    optimizer: str = "adam"
    seed: int = 0
    weight_decay: float = 0.0
    #: steps between step-resolution validation RMSE probes; 0 disables
    probe_every: int = 0
    #: hard cap on optimizer steps (None = epochs decide)
    max_steps: int | None = None
    #: stop once a probe sees val RMSE at or below this level
    stop_at_rmse: float | None = None
    #: parameter-name prefixes to freeze; empty = all layers trainable
    freeze_prefixes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ValueError("only the adaptive-moment optimizer is supported")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel, building pixels included."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(pred, target)


@dataclass
class TrainData:
    """In-memory tensors for one dataset split pair."""

    train_x: torch.Tensor
    train_y: torch.Tensor
    val_x: torch.Tensor
    val_y: torch.Tensor
    train_map_ids: list[str]

    @classmethod
    def from_manifest(cls, manifest: ds.DatasetManifest, root) -> "TrainData":
        def load(split):
            xs, ys, ids = [], [], []
            for rec in manifest.records(split):
                s = ds.load_sample(rec, root)
                xs.append(
                    np.stack(
                        [
                            s.map_channel.astype(np.float32) / 255.0,
                            s.tx_channel.astype(np.float32) / 255.0,
                        ]
                    )
                )
                ys.append(s.target.astype(np.float32)[None] / 255.0)
                ids.append(rec.map_id)
            if not xs:
                raise ValueError(f"manifest has no {split} samples")
            return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)), ids

        tx, ty, tids = load(ds.TRAIN)
        vx, vy, _ = load(ds.VAL)
        return cls(train_x=tx, train_y=ty, val_x=vx, val_y=vy, train_map_ids=tids)

    def subsample_maps(self, fraction: float, seed: int) -> "TrainData":
        """Keep a map-exclusive fraction of the training split; VAL untouched."""
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if fraction == 1.0:
            return self
        ids = list(dict.fromkeys(self.train_map_ids))
        order = list(np.random.default_rng(seed).permutation(ids))
        n_target = fraction * len(self.train_map_ids)
        keep_ids: set[str] = set()
        count = 0
        for mid in order:
            if count >= n_target and keep_ids:
                break
            keep_ids.add(mid)
            count += self.train_map_ids.count(mid)
        keep = [i for i, mid in enumerate(self.train_map_ids) if mid in keep_ids]
        idx = torch.tensor(keep, dtype=torch.long)
        return TrainData(
            train_x=self.train_x[idx],
            train_y=self.train_y[idx],
            val_x=self.val_x,
            val_y=self.val_y,
            train_map_ids=[self.train_map_ids[i] for i in keep],
        )


@dataclass
class TrainRun:
    step_history: list[tuple[int, float]] = field(default_factory=list)
    epoch_history: list[tuple[int, float]] = field(default_factory=list)
    probe_history: list[tuple[int, float]] = field(default_factory=list)
    lr_history: list[tuple[int, float]] = field(default_factory=list)
    best_val_mse: float = math.inf
    best_epoch: int = -1
    best_state: dict | None = None
    final_val_mse: float = math.nan
    final_val_rmse: float = math.nan
    total_steps: int = 0
    wall_time: float = 0.0
    stopped_early: bool = False


@torch.no_grad()
def _validate(model: PMNet, xs: torch.Tensor, ys: torch.Tensor, batch: int) -> tuple[float, float]:
    """(pixel MSE, mean per-sample RMSE) over a validation tensor pair."""
    was_training = model.training
    model.eval()
    sq_sum = 0.0
    n_px = 0
    rmses = []
    for i in range(0, len(xs), batch):
        pred = model(xs[i : i + batch])
        err = (pred - ys[i : i + batch]) ** 2
        sq_sum += float(err.sum())
        n_px += err.numel()
        rmses.extend(torch.sqrt(err.mean(dim=(1, 2, 3))).tolist())
    if was_training:
        model.train()
    return sq_sum / n_px, float(np.mean(rmses))


def train(model: PMNet, data: TrainData, cfg: TrainConfig, run_dir=None) -> TrainRun:
    """Fit the model in place and return the run trajectory.

    Learning rate halves every lr_step_epochs epochs (per the configured
    gamma); validation MSE is computed each epoch and the best parameters are
    retained. Aborts with diagnostics if the loss stops being finite.
    """
    torch.manual_seed(cfg.seed)
    for name, p in model.named_parameters():
        p.requires_grad_(not any(name.startswith(pre) for pre in cfg.freeze_prefixes))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr_initial, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step_epochs, gamma=cfg.lr_gamma)
    gen = torch.Generator().manual_seed(cfg.seed)

    run = TrainRun()
    t0 = time.time()
    step = 0
    n = len(data.train_x)
    done = False
    for epoch in range(cfg.epochs):
        run.lr_history.append((epoch, opt.param_groups[0]["lr"]))
        model.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            pred = model(data.train_x[idx])
            loss = mse_loss(pred, data.train_y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, "
                    f"lr {opt.param_groups[0]['lr']:g})"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            run.step_history.append((step, loss.item()))
            if cfg.probe_every and step % cfg.probe_every == 0:
                _, val_rmse = _validate(model, data.val_x, data.val_y, cfg.batch_size)
                run.probe_history.append((step, val_rmse))
                if cfg.stop_at_rmse is not None and val_rmse <= cfg.stop_at_rmse:
                    run.stopped_early = True
                    done = True
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
            if done:
                break
        val_mse, val_rmse = _validate(model, data.val_x, data.val_y, cfg.batch_size)
        run.epoch_history.append((epoch, val_mse))
        run.final_val_mse = val_mse
        run.final_val_rmse = val_rmse
        if val_mse < run.best_val_mse:
            run.best_val_mse = val_mse
            run.best_epoch = epoch
            run.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        sched.step()
        if done:
            break
    run.total_steps = step
    run.wall_time = time.time() - t0
    if run_dir is not None:
        _write_run_dir(Path(run_dir), model, run, cfg)
    return run


def finetune(
    pretrained,
    data: TrainData,
    fraction: float,
    cfg: TrainConfig,
    model_cfg: PmnetConfig | None = None,
    run_dir=None,
) -> tuple[PMNet, TrainRun]:
    """Continue training from a checkpoint on a fraction of the target split.

    All layers start from the checkpoint and stay trainable. fraction
    subsamples whole maps out of the training split; validation is fixed.
    With pretrained=None this degenerates to training from scratch.
    """
    if pretrained is None:
        model = build_pmnet(model_cfg or PmnetConfig.desk(), seed=cfg.seed)
    else:
        model, _ = load_checkpoint(pretrained)
        if model_cfg is not None and model.cfg != model_cfg:
            raise ValueError(
                f"checkpoint config {model.cfg} incompatible with requested {model_cfg}"
            )
    if model.cfg.input_size != data.train_x.shape[-1]:
        raise ValueError(
            f"model expects {model.cfg.input_size}px inputs, data is "
            f"{data.train_x.shape[-1]}px"
        )
    subset = data.subsample_maps(fraction, cfg.seed)
    run = train(model, subset, cfg, run_dir=run_dir)
    return model, run


def steps_to_threshold(run: TrainRun, thresholds) -> dict[float, int | None]:
    """First probe step at which validation RMSE reached each threshold.

    Step counts are optimizer steps; None means the run never got there.
    Requires the run to have been trained with probe_every > 0.
    """
    out: dict[float, int | None] = {}
    for thr in thresholds:
        out[thr] = next((s for s, v in run.probe_history if v <= thr), None)
    return out


def data_fraction_sweep(
    pretrained,
    data: TrainData,
    fractions,
    cfg: TrainConfig,
    model_cfg: PmnetConfig | None = None,
    out_dir=None,
) -> list[dict]:
    """Fine-tune once per training-data fraction and tabulate final accuracy."""
    rows = []
    for frac in fractions:
        _, run = finetune(pretrained, data, frac, cfg, model_cfg=model_cfg)
        rows.append(
            {
                "fraction": frac,
                "pretrained": str(pretrained) if pretrained else "none",
                "final_val_rmse": run.final_val_rmse,
                "best_val_mse": run.best_val_mse,
                "steps": run.total_steps,
            }
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        _plot_sweep(rows, out_dir / "sweep.png")
    return rows


def _plot_sweep(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["fraction"] for r in rows], [r["final_val_rmse"] for r in rows], "o-")
    ax.set_xlabel("training data fraction")
    ax.set_ylabel("final val RMSE")
    ax.grid(alpha=0.4)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _write_run_dir(run_dir: Path, model: PMNet, run: TrainRun, cfg: TrainConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"train": asdict(cfg), "model": asdict(model.cfg)}, sort_keys=True, indent=1)
        + "\n"
    )
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "split", "metric", "value"])
        for s, v in run.step_history:
            writer.writerow([s, "train", "mse", v])
        for e, v in run.epoch_history:
            writer.writerow([e, "val", "epoch_mse", v])
        for s, v in run.probe_history:
            writer.writerow([s, "val", "probe_rmse", v])
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_checkpoint(
        model,
        ckpt_dir / "final.pt",
        meta={"epoch": len(run.epoch_history) - 1, "val_mse": run.final_val_mse},
    )
    if run.best_state is not None:
        best = copy.deepcopy(model)
        best.load_state_dict(run.best_state)
        save_checkpoint(
            best, ckpt_dir / "best.pt", meta={"epoch": run.best_epoch, "val_mse": run.best_val_mse}
        )
    (run_dir / "report.json").write_text(
        json.dumps(
            {
                "best_val_mse": run.best_val_mse,
                "best_epoch": run.best_epoch,
                "final_val_mse": run.final_val_mse,
                "final_val_rmse": run.final_val_rmse,
                "total_steps": run.total_steps,
                "wall_time_s": run.wall_time,
                "stopped_early": run.stopped_early,
                "step_unit": "optimizer steps",
            },
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
