"""Class-frequency weights, weighted cross-entropy and the head training loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateDataError, ParameterError, ShapeError, TrainingError, UndefinedLossError
from .head import FCNHead, predict_mask, save_head
from .metrics import ConfusionMatrix, accumulate, report

log = logging.getLogger(__name__)


@dataclass
class ClassWeights:
    weights: np.ndarray  # length K; the ignore class implicitly weighs 0
    pixel_counts: np.ndarray
    total: int

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.weights, dtype=dtype)

    @classmethod
    def uniform(cls, K: int) -> "ClassWeights":
        return cls(np.ones(K), np.zeros(K, dtype=np.int64), 0)


def compute_class_weights(masks, K: int, ignore_index: int | None = None) -> ClassWeights:
    """W_c = 1 − N_c / N with N counting every non-ignore training pixel."""
    ignore = K if ignore_index is None else ignore_index
    masks = list(masks)
    if not masks:
        raise ParameterError("no masks given")
    counts = np.zeros(K, dtype=np.int64)
    for m in masks:
        m = np.asarray(getattr(m, "classes", m))
        vals = m[m != ignore]
        if vals.size and (vals.min() < 0 or vals.max() >= K):
            raise ValueError("mask contains ids outside [0, K) and the ignore index")
        counts += np.bincount(vals.ravel().astype(np.int64), minlength=K)
    N = int(counts.sum())
    if N == 0:
        raise DegenerateDataError("no non-ignore pixels to derive class weights from")
    weights = 1.0 - counts / N
    if (counts == N).any():
        warnings.warn("a single class covers every labelled pixel; its loss weight is 0",
                      RuntimeWarning, stacklevel=2)
    return ClassWeights(weights, counts, N)


def weighted_ce_loss(logits: torch.Tensor, target, weights, ignore_index: int | None = None) -> torch.Tensor:
    """Mean over non-ignore pixels of ``w[target] * -log softmax(logits)[target]``.

    ``logits`` is ``(N, K, H, W)`` or ``(K, H, W)``; ``target`` matches without
    the class axis.  Note the mean divides by the pixel count, not the sum of
    weights.
    """
    if logits.ndim == 3:
        logits = logits[None]
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(np.asarray(getattr(target, "classes", target)))
    if target.ndim == 2:
        target = target[None]
    K = logits.shape[1]
    if target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    ignore = K if ignore_index is None else ignore_index
    w = weights.tensor(logits.dtype) if isinstance(weights, ClassWeights) else torch.as_tensor(weights, dtype=logits.dtype)
    target = target.long()
    keep = target != ignore
    n = int(keep.sum())
    if n == 0:
        raise UndefinedLossError("every pixel is ignored")
    safe = torch.where(keep, target, torch.zeros_like(target))
    nll = -F.log_softmax(logits, dim=1).gather(1, safe[:, None])[:, 0]
    return (w[safe] * nll * keep).sum() / n


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 200
    batch_size: int = 2
    seed: int = 0
    timestep: int = 50
    blocks: object = "all"
    loss_weighting: str = "frequency"  # frequency | uniform
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ParameterError("learning_rate must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps must be >= 0 and batch_size >= 1")
        if self.loss_weighting not in ("frequency", "uniform"):
            raise ParameterError(f"unknown loss weighting {self.loss_weighting!r}")


@dataclass
class TrainingLog:
    entries: list = field(default_factory=list)

    def steps(self) -> list[dict]:
        return [e for e in self.entries if e["kind"] == "step"]

    def epochs(self) -> list[dict]:
        return [e for e in self.entries if e["kind"] == "epoch"]

    @property
    def final_validation(self) -> dict | None:
        vals = [e["val"] for e in self.epochs() if e.get("val")]
        return vals[-1] if vals else None

    @property
    def best_validation(self) -> dict | None:
        vals = [e["val"] for e in self.epochs() if e.get("val")]
        return max(vals, key=lambda v: v["mIoU"]) if vals else None

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")
        return path


@dataclass
class FeatureDataset:
    """Pre-extracted stitched features ``(C, h, w)`` paired with ``(H, W)`` masks."""

    features: list[torch.Tensor]
    masks: list[np.ndarray]
    ids: list = None

    def __post_init__(self):
        if len(self.features) != len(self.masks):
            raise ShapeError("features and masks differ in length")
        if self.ids is None:
            self.ids = list(range(len(self.features)))

    def __len__(self):
        return len(self.features)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.stack([self.features[i] for i in idx])
        y = torch.stack([torch.from_numpy(np.asarray(self.masks[i], dtype=np.int64)) for i in idx])
        return x, y


@torch.no_grad()
def predict_dataset(head: FCNHead, data: FeatureDataset, batch_size: int = 2) -> list[np.ndarray]:
    was_training = head.training
    head.eval()
    out = []
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(start + batch_size, len(data))))
        x, _ = data.batch(idx)
        out.extend(predict_mask(head(x)))
    head.train(was_training)
    return out


def evaluate_head(head: FCNHead, data: FeatureDataset, K: int, ignore_index: int | None = None, **kw):
    cm = ConfusionMatrix(K)
    for pred, truth in zip(predict_dataset(head, data), data.masks):
        cm = accumulate(cm, pred, truth, ignore_index)
    return report(cm, **kw)


def train_head(
    dataset: FeatureDataset,
    backbone,
    head: FCNHead,
    config: TrainConfig,
    val: FeatureDataset | None = None,
    weights: ClassWeights | None = None,
    ignore_index: int | None = None,
) -> tuple[FCNHead, TrainingLog]:
    """Adam on the head only; the backbone must be frozen and stays bit-identical."""
    if len(dataset) == 0:
        raise ParameterError("empty training set")
    if backbone is not None and not backbone.frozen:
        raise ParameterError("backbone must be frozen before head training")
    K = head.num_classes
    ignore = K if ignore_index is None else ignore_index
    before = backbone.weight_hash() if backbone is not None else None
    if weights is None:
        weights = (compute_class_weights(dataset.masks, K, ignore)
                   if config.loss_weighting == "frequency" else ClassWeights.uniform(K))
    w = weights.tensor(next(head.parameters()).dtype)
    if val is None or len(val) == 0:
        warnings.warn("no validation split; per-epoch metrics skipped", RuntimeWarning, stacklevel=2)
        val = None

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate,
                           betas=tuple(config.adam_betas), eps=config.adam_eps)
    tlog = TrainingLog()
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    n_epochs = math.ceil(config.steps / per_epoch) if config.steps else 0
    step = 0
    head.train()
    for epoch in range(n_epochs):
        order = torch.randperm(len(dataset), generator=gen).tolist()
        for start in range(0, len(order), config.batch_size):
            if step >= config.steps:
                break
            x, y = dataset.batch(order[start:start + config.batch_size])
            loss = weighted_ce_loss(head(x.to(w.dtype)), y, w, ignore)
            if not torch.isfinite(loss):
                recent = [e["loss"] for e in tlog.steps()[-5:]]
                raise TrainingError(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {config.learning_rate}); "
                    f"recent losses {recent}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            tlog.entries.append({"kind": "step", "step": step, "epoch": epoch,
                                 "loss": loss.item(), "lr": config.learning_rate})
        entry = {"kind": "epoch", "epoch": epoch, "step": step}
        if val is not None:
            entry["val"] = evaluate_head(head, val, K, ignore).to_dict()
        tlog.entries.append(entry)
        if config.checkpoint_dir:
            save_head(head, Path(config.checkpoint_dir) / f"head_epoch{epoch:03d}.pt",
                      {"epoch": epoch, "step": step})
        log.debug("epoch %d step %d loss %.4f", epoch, step, tlog.steps()[-1]["loss"] if step else float("nan"))
    head.eval()
    if before is not None and backbone.weight_hash() != before:
        raise TrainingError("backbone weights changed during head training")
    return head, tlog


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["adam_betas"] = list(d["adam_betas"])
    return d
