"""Confusion-matrix based segmentation metrics with ignore-index exclusion."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, UndefinedMetricsError


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    num_classes: int
    counts: np.ndarray = None
    ignored_pixels: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts,
                               self.ignored_pixels + other.ignored_pixels)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored_pixels


def accumulate(cm: ConfusionMatrix, pred, truth, ignore_index: int | None = None) -> ConfusionMatrix:
    """Return ``cm`` plus the tallies of one prediction/truth pair.

    ``ignore_index`` defaults to K.  Pixels whose truth is ignored only bump
    ``ignored_pixels``.
    """
    pred = np.asarray(getattr(pred, "classes", pred))
    truth = np.asarray(getattr(truth, "classes", truth))
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    K = cm.num_classes
    ignore = K if ignore_index is None else ignore_index
    keep = truth != ignore
    p, g = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= K):
        raise ValueError("prediction contains ids outside [0, K)")
    if g.size and (g.min() < 0 or g.max() >= K):
        raise ValueError("ground truth contains ids outside [0, K) and the ignore index")
    tally = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return ConfusionMatrix(K, cm.counts + tally, cm.ignored_pixels + int((~keep).sum()))


@dataclass
class MetricsReport:
    accuracy: float
    mean_dice: float
    mIoU: float
    f1: float
    per_class: dict = field(default_factory=dict)
    f1_average: str = "macro"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def _div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a, dtype=np.float64)
    np.divide(a, b, out=out, where=b > 0)
    return out


def report(cm: ConfusionMatrix, f1_average: str = "macro", exclude_classes=()) -> MetricsReport:
    """Accuracy, mean Dice, mIoU and F1 from a confusion matrix.

    Class means skip classes absent from both truth and prediction, and any
    id in ``exclude_classes``.  ``f1_average`` is ``macro`` (per-class F1
    averaged), ``micro`` (pooled counts) or ``weighted`` (by truth support).
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise UndefinedMetricsError("no counted pixels")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    iou = _div(tp, tp + fp + fn)
    dice = _div(2 * tp, 2 * tp + fp + fn)
    precision = _div(tp, tp + fp)
    recall = _div(tp, tp + fn)
    f1c = _div(2 * precision * recall, precision + recall)
    present = (tp + fp + fn) > 0
    for c in exclude_classes:
        present[c] = False
    if not present.any():
        raise UndefinedMetricsError("every class is excluded or absent")
    if f1_average == "macro":
        f1 = f1c[present].mean()
    elif f1_average == "micro":
        s_tp, s_fp, s_fn = tp[present].sum(), fp[present].sum(), fn[present].sum()
        f1 = 2 * s_tp / (2 * s_tp + s_fp + s_fn) if s_tp + s_fp + s_fn else 0.0
    elif f1_average == "weighted":
        support = (tp + fn)[present]
        f1 = (f1c[present] * support).sum() / support.sum() if support.sum() else 0.0
    else:
        raise ValueError(f"unknown F1 averaging {f1_average!r}")
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        mean_dice=float(dice[present].mean()),
        mIoU=float(iou[present].mean()),
        f1=float(f1),
        per_class={
            "iou": iou.tolist(),
            "dice": dice.tolist(),
            "precision": precision.tolist(),
            "recall": recall.tolist(),
            "present": present.tolist(),
        },
        f1_average=f1_average,
    )


def evaluate_masks(preds, truths, num_classes: int, ignore_index: int | None = None, **kw) -> MetricsReport:
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, truths):
        cm = accumulate(cm, p, g, ignore_index)
    return report(cm, **kw)


def append_csv_row(path, row: dict) -> Path:
    """Append one evaluation row, writing the header when the file is new."""
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if new:
            writer.writeheader()
        writer.writerow(row)
    return path
