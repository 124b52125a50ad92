"""Training runs, evaluation and the three ablation sweeps (timestep, lr, blocks).

A run directory holds::

    config.json        resolved config snapshot (re-runnable as-is)
    backbone.ckpt      frozen backbone used by the run (toy backbones only)
    train_log.jsonl    one JSON object per step / epoch
    checkpoints/       head checkpoint per epoch
    head.pt            final (last-epoch) head
    metrics.json       {"train": report, "val": report, "best_validation": ...}
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .backbone import (Backbone, build_toy_backbone, load_backbone, pretrain_autoencoder,
                       pretrain_denoiser, save_backbone)
from .data import DatasetManifest, data_root, generate_synthetic_dataset, load_manifest
from .errors import ConfigError, ParameterError, TrainingError, ValidationError
from .features import FeatureCache, resolve_blocks
from .grid import extract_image_features
from .head import build_head, load_head, save_head, save_mask_png
from .metrics import ConfusionMatrix, accumulate, report
from .schedule import build_schedule
from .training import FeatureDataset, TrainConfig, evaluate_head, predict_dataset, train_head

log = logging.getLogger(__name__)


class RunContext:
    """Dataset, backbone and extracted features shared by the runs of one sweep."""

    def __init__(self, cfg: dict, workdir):
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest = resolve_dataset(cfg, self.workdir)
        self.backbone, self.backbone_path = resolve_backbone(cfg, self.manifest, self.workdir)
        self.cache = FeatureCache(cfg["cache_dir"]) if cfg.get("cache_dir") else None
        self._features: dict = {}
        self._lock = threading.Lock()

    def features(self, split: str, t: int, blocks, cfg: dict) -> FeatureDataset:
        """Stitched features for every item of ``split`` at timestep ``t``."""
        blocks = resolve_blocks(self.backbone, blocks)
        key = (split, int(t), tuple(blocks), cfg["diffusion"]["T"], cfg["diffusion"]["beta_start"],
               cfg["diffusion"]["beta_end"], cfg["grid"]["feature_size"], cfg["seed"])
        with self._lock:
            if key not in self._features:
                self._features[key] = extract_split(self.manifest, split, self.backbone, cfg, t, blocks, self.cache)
            return self._features[key]


def resolve_dataset(cfg: dict, workdir: Path) -> DatasetManifest:
    ds = cfg["dataset"]
    if ds["name"] not in cfgmod.DATASET_NAMES:
        raise ConfigError(f"unknown dataset {ds['name']!r}")
    if ds["name"] == "synthetic" and not ds.get("manifest"):
        root = Path(ds["root"]) if ds.get("root") else workdir / "data"
        if (root / "manifest.json").exists():
            return load_manifest(root)
        return generate_synthetic_dataset(ds["n"], ds["num_classes"], ds["seed"], root,
                                          size=ds["size"], n_val=ds["n_val"])
    path = Path(ds["manifest"])
    if not path.is_absolute() and data_root():
        path = data_root() / path
    if not path.exists():
        raise ConfigError(f"dataset manifest {path} not found")
    return load_manifest(path)


def resolve_backbone(cfg: dict, manifest: DatasetManifest, workdir: Path) -> tuple[Backbone, Path]:
    bcfg = cfg["backbone"]
    if bcfg.get("path"):
        path = Path(bcfg["path"])
        if not path.exists():
            raise ConfigError(f"backbone checkpoint {path} not found")
        backbone, _ = load_backbone(path)
        if backbone.descriptor.conditioning != bcfg["conditioning"]:
            backbone.descriptor.conditioning = bcfg["conditioning"]
        return backbone, path
    backbone = build_toy_backbone(bcfg["seed"], patch_size=cfg["grid"]["patch"],
                                  conditioning=bcfg["conditioning"])
    ae_steps, den_steps = bcfg["autoencoder_steps"], bcfg["denoiser_steps"]
    if ae_steps or den_steps:
        images = [img for _, img, _ in manifest.load_split(cfg["dataset"]["train_split"])]
    if ae_steps:
        pretrain_autoencoder(backbone, images, steps=ae_steps, seed=bcfg["seed"])
    if den_steps:
        d = cfg["diffusion"]
        schedule = build_schedule(d["T"], d["beta_start"], d["beta_end"])
        pretrain_denoiser(backbone, images, schedule, steps=den_steps, seed=bcfg["seed"])
    path = save_backbone(backbone, workdir / "backbone.ckpt")
    return backbone, path


def extract_split(manifest: DatasetManifest, split: str, backbone: Backbone, cfg: dict, t: int,
                  blocks, cache=None) -> FeatureDataset:
    d, g = cfg["diffusion"], cfg["grid"]
    schedule = build_schedule(d["T"], d["beta_start"], d["beta_end"])
    feats, masks, ids = [], [], []
    for item_id, image, mask in manifest.load_split(split):
        fm = extract_image_features(image, backbone, schedule, t, blocks, cfg["seed"], image_id=item_id,
                                    G=g["size"], P=g["patch"], feature_size=g["feature_size"], cache=cache)
        feats.append(fm.values)
        masks.append(mask)
        ids.append(item_id)
    return FeatureDataset(feats, masks, ids)


def loss_weighting(cfg: dict, manifest: DatasetManifest) -> str:
    lw = cfg["train"]["loss_weighting"]
    if lw is None:
        lw = "uniform" if manifest.name == "glas" else "frequency"
    return lw


def _report_dict(head, data, manifest, cfg) -> dict:
    m = cfg["metrics"]
    return evaluate_head(head, data, manifest.num_classes, manifest.ignore_index,
                         f1_average=m["f1_average"], exclude_classes=m["exclude_classes"]).to_dict()


def run_training(cfg: dict, context: RunContext | None = None) -> Path:
    """Train a head end to end; returns the run directory."""
    cfgmod.validate(cfg)
    cfg = copy.deepcopy(cfg)
    run_dir = Path(cfg["output_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    ctx = context or RunContext(cfg, run_dir)
    cfg["backbone"]["path"] = str(ctx.backbone_path)
    if ctx.manifest.root is not None and cfg["dataset"]["name"] == "synthetic":
        cfg["dataset"]["manifest"] = str(ctx.manifest.root / "manifest.json")
    cfgmod.dump(cfg, run_dir / "config.json")

    tr, ds = cfg["train"], cfg["dataset"]
    t = int(cfg["diffusion"]["timestep"])
    blocks = resolve_blocks(ctx.backbone, tr["blocks"])
    train = ctx.features(ds["train_split"], t, blocks, cfg)
    val = ctx.features(ds["val_split"], t, blocks, cfg) if ds["val_split"] in ctx.manifest.splits else None
    head = build_head(train.features[0].shape[0], ctx.manifest.num_classes, train.features[0].shape[-1],
                      train.masks[0].shape[-1], cfg["head"]["widths"], seed=tr["seed"])
    tcfg = TrainConfig(
        learning_rate=tr["learning_rate"], steps=tr["steps"], batch_size=tr["batch_size"],
        seed=tr["seed"], timestep=t, blocks=blocks, loss_weighting=loss_weighting(cfg, ctx.manifest),
        checkpoint_dir=str(run_dir / "checkpoints") if tr.get("checkpoint_every_epoch") else None,
    )
    before = ctx.backbone.weight_hash()
    head, tlog = train_head(train, ctx.backbone, head, tcfg, val=val, ignore_index=ctx.manifest.ignore_index)
    if ctx.backbone.weight_hash() != before:
        raise TrainingError("backbone changed during training")
    tlog.to_jsonl(run_dir / "train_log.jsonl")
    save_head(head, run_dir / "head.pt", {"run_config": "config.json", "blocks": blocks, "timestep": t})
    metrics = {
        "train": _report_dict(head, train, ctx.manifest, cfg),
        "val": _report_dict(head, val, ctx.manifest, cfg) if val is not None else None,
        "final_validation": tlog.final_validation,
        "best_validation": tlog.best_validation,
        "backbone_hash": before,
    }
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return run_dir


def evaluate(run_dir, split: str = "val", dump_masks: bool = False, out_dir=None,
             num_classes: int | None = None) -> dict:
    """Evaluate a trained run on ``split``; writes ``eval_<split>.json``.

    ``num_classes`` (when given) must match the checkpoint, otherwise a
    :class:`ValidationError` is raised.
    """
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    head, manifest_info = load_head(run_dir / "head.pt")
    manifest = load_manifest(cfg["dataset"]["manifest"])
    if manifest_info["num_classes"] != manifest.num_classes:
        raise ValidationError(f"head predicts {manifest_info['num_classes']} classes, "
                              f"dataset has {manifest.num_classes}")
    if num_classes is not None and num_classes != manifest_info["num_classes"]:
        raise ValidationError(f"requested K={num_classes}, checkpoint has K={manifest_info['num_classes']}")
    backbone, _ = load_backbone(cfg["backbone"]["path"])
    backbone.descriptor.conditioning = cfg["backbone"]["conditioning"]
    data = extract_split(manifest, split, backbone, cfg, int(cfg["diffusion"]["timestep"]),
                         manifest_info["blocks"])
    if data.features and data.features[0].shape[0] != manifest_info["in_channels"]:
        raise ValidationError("feature channels do not match the head checkpoint")
    preds = predict_dataset(head, data)
    m = cfg["metrics"]
    total = ConfusionMatrix(manifest.num_classes)
    per_image = {}
    for item_id, pred, truth in zip(data.ids, preds, data.masks):
        cm = accumulate(ConfusionMatrix(manifest.num_classes), pred, truth, manifest.ignore_index)
        total = total + cm
        if cm.counts.sum():
            per_image[item_id] = report(cm, m["f1_average"], m["exclude_classes"]).to_dict()
    result = {
        "split": split,
        "aggregate": report(total, m["f1_average"], m["exclude_classes"]).to_dict(),
        "per_image": per_image,
    }
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"eval_{split}.json").write_text(json.dumps(result, indent=2))
    if dump_masks:
        for item_id, pred in zip(data.ids, preds):
            save_mask_png(pred, out_dir / "masks" / split / f"{item_id}.png",
                          manifest.class_names, manifest.ignore_index)
    return result


# Sweeps -----------------------------------------------------------------------

def _metric_row(run_dir: Path) -> dict:
    metrics = json.loads((run_dir / "metrics.json").read_text())
    rep = metrics["val"] or metrics["train"]
    return {"accuracy": rep["accuracy"], "dice": rep["mean_dice"], "mIoU": rep["mIoU"], "f1": rep["f1"]}


def _dedupe(values: list, what: str) -> list:
    seen, out = set(), []
    for v in values:
        key = tuple(v) if isinstance(v, list) else v
        if key in seen:
            continue
        seen.add(key)
        out.append(v)
    if len(out) != len(values):
        warnings.warn(f"duplicate {what} values removed", RuntimeWarning, stacklevel=3)
    return out


def _run_many(cfg: dict, ctx: RunContext, variants: list[tuple[str, dict]]) -> list[Path]:
    def one(item):
        name, overrides = item
        run_cfg = copy.deepcopy(cfg)
        for dotted, value in overrides.items():
            cfgmod.set_dotted(run_cfg, dotted, value)
        run_cfg["output_dir"] = str(Path(cfg["output_dir"]) / name)
        return run_training(run_cfg, ctx)

    workers = max(1, int(cfg.get("parallel") or 1))
    if workers == 1:
        return [one(v) for v in variants]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, variants))


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def _check_backbone(ctx: RunContext, before: str) -> None:
    if ctx.backbone.weight_hash() != before:
        raise TrainingError("a sweep run modified the shared backbone")


def _sweep_context(cfg: dict) -> RunContext:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "sweep_config.json")
    return RunContext(cfg, out)


def run_timestep_sweep(cfg: dict, timesteps, plot: bool = True) -> Path:
    """One run per timestep; writes ``timestep_sweep.csv`` (t, accuracy, dice, mIoU)."""
    T = int(cfg["diffusion"]["T"])
    bad = [t for t in timesteps if isinstance(t, bool) or int(t) != t or not 0 <= t <= T]
    if bad:
        raise ParameterError(f"timesteps {bad} outside [0, {T}]")
    timesteps = _dedupe([int(t) for t in timesteps], "timestep")
    ctx = _sweep_context(cfg)
    before = ctx.backbone.weight_hash()
    runs = _run_many(cfg, ctx, [(f"t{t:04d}", {"diffusion.timestep": t}) for t in timesteps])
    rows = []
    for t, run in zip(timesteps, runs):
        r = _metric_row(run)
        rows.append({"t": t, "accuracy": r["accuracy"], "dice": r["dice"], "mIoU": r["mIoU"]})
    _check_backbone(ctx, before)
    path = _write_csv(Path(cfg["output_dir"]) / "timestep_sweep.csv", rows)
    if plot:
        plot_csv(path)
    return path


def run_lr_sweep(cfg: dict, lrs, plot: bool = False) -> Path:
    """One run per learning rate; ``lr_sweep.csv`` with columns (lr, accuracy, mIoU, dice)."""
    bad = [lr for lr in lrs if not float(lr) > 0]
    if bad:
        raise ParameterError(f"learning rates must be positive, got {bad}")
    lrs = _dedupe([float(lr) for lr in lrs], "learning rate")
    ctx = _sweep_context(cfg)
    before = ctx.backbone.weight_hash()
    runs = _run_many(cfg, ctx, [(f"lr{lr:g}", {"train.learning_rate": lr}) for lr in lrs])
    rows = []
    for lr, run in zip(lrs, runs):
        r = _metric_row(run)
        rows.append({"lr": f"{lr:g}", "accuracy": r["accuracy"], "mIoU": r["mIoU"], "dice": r["dice"]})
    _check_backbone(ctx, before)
    path = _write_csv(Path(cfg["output_dir"]) / "lr_sweep.csv", rows)
    if plot:
        plot_csv(path)
    return path


def default_block_selections(block_ids: list[str]) -> list[list[str]]:
    """Every single block, then all blocks together."""
    return [[b] for b in block_ids] + [list(block_ids)]


def run_block_sweep(cfg: dict, selections=None, plot: bool = True) -> Path:
    """One run per block selection; ``block_sweep.csv`` plus a bar chart."""
    ctx = _sweep_context(cfg)
    ids = ctx.backbone.descriptor.block_ids
    if selections is None:
        selections = default_block_selections(ids)
    cleaned = []
    for sel in selections:
        sel = [sel] if isinstance(sel, str) else list(sel)
        cleaned.append(resolve_blocks(ctx.backbone, sel))  # raises on empty / unknown ids
    cleaned = _dedupe(cleaned, "block selection")
    before = ctx.backbone.weight_hash()
    runs = _run_many(cfg, ctx, [("blocks_" + "+".join(sel), {"train.blocks": sel}) for sel in cleaned])
    rows = []
    for sel, run in zip(cleaned, runs):
        r = _metric_row(run)
        label = "all" if sel == ids else "+".join(sel)
        rows.append({"selection": label, "channels": sum(ctx.backbone.descriptor.channels_of(b) for b in sel), **r})
    _check_backbone(ctx, before)
    path = _write_csv(Path(cfg["output_dir"]) / "block_sweep.csv", rows)
    if plot:
        plot_csv(path)
    return path


def plot_csv(csv_path, out=None) -> Path:
    """Line chart for numeric first columns (t, lr), bar chart otherwise."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParameterError(f"{csv_path} has no rows")
    xkey = next(iter(rows[0]))
    metrics = [k for k in ("accuracy", "dice", "mIoU") if k in rows[0]]
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        xs = [float(r[xkey]) for r in rows]
        for k in metrics:
            ax.plot(xs, [float(r[k]) for r in rows], marker="o", label=k)
        if xkey == "lr":
            ax.set_xscale("log")
    except ValueError:
        pos = np.arange(len(rows))
        width = 0.8 / len(metrics)
        for i, k in enumerate(metrics):
            ax.bar(pos + i * width, [float(r[k]) for r in rows], width, label=k)
        ax.set_xticks(pos + width * (len(metrics) - 1) / 2)
        ax.set_xticklabels([r[xkey] for r in rows], rotation=45, ha="right")
    ax.set_xlabel(xkey)
    ax.set_ylabel("validation metric")
    ax.legend()
    fig.tight_layout()
    out = Path(out) if out else csv_path.with_suffix(".png")
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
