"""Trainable FCN head: conv -> transposed conv ×2 -> classifier conv."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import LoadError, ParameterError, ShapeError
from .features import bilinear_upsample

log = logging.getLogger(__name__)

DEFAULT_WIDTHS = (256, 128, 64)


def stride_plan(total: int) -> tuple[int, int, int]:
    """Split an upsampling factor into (up1, up2, residual).

    Each transposed conv doubles the resolution at most; whatever is left is a
    bilinear resize of the logits.  ``up1 * up2 * residual == total``.
    """
    if total < 1 or int(total) != total:
        raise ParameterError(f"upsampling factor must be a positive integer, got {total}")
    total = int(total)
    s1 = 2 if total % 2 == 0 else 1
    s2 = 2 if (total // s1) % 2 == 0 else 1
    return s1, s2, total // (s1 * s2)


class TransposedConv2d(nn.ConvTranspose2d):
    """``nn.ConvTranspose2d`` that runs non-overlapping kernels as conv + pixel shuffle.

    With kernel == stride and no padding every output pixel receives exactly
    one input contribution, so the op is a 1×1 conv to ``out·s²`` channels
    followed by a pixel shuffle; on CPU this is noticeably faster.
    """

    def _non_overlapping(self) -> bool:
        s = self.stride[0]
        return (s > 1 and self.kernel_size == (s, s) and self.stride == (s, s)
                and self.padding == (0, 0) and self.output_padding == (0, 0)
                and self.groups == 1 and self.dilation == (1, 1))

    def forward(self, x, output_size=None):
        if output_size is not None or not self._non_overlapping():
            return super().forward(x, output_size)
        s = self.stride[0]
        # (in, out, s, s) -> (out·s·s, in, 1, 1) in pixel_shuffle channel order
        w = self.weight.permute(1, 2, 3, 0).reshape(self.out_channels * s * s, self.in_channels, 1, 1)
        bias = None if self.bias is None else self.bias.repeat_interleave(s * s)
        return F.pixel_shuffle(F.conv2d(x, w, bias), s)


def _up_layer(cin: int, cout: int, stride: int) -> TransposedConv2d:
    # output size is exactly input * stride in both branches
    if stride == 1:
        return TransposedConv2d(cin, cout, 3, stride=1, padding=1, bias=False)
    return TransposedConv2d(cin, cout, stride, stride=stride, bias=False)


class FCNHead(nn.Module):
    """Maps a ``(N, C, h, w)`` feature map to ``(N, K, h·s, w·s)`` logits.

    ``upsample`` is the total spatial factor between stitched features and the
    image (see :func:`stride_plan`).  Every layer but the classifier is
    followed by BatchNorm + ReLU.
    """

    def __init__(self, in_channels: int, num_classes: int, widths=DEFAULT_WIDTHS, upsample: int = 1):
        super().__init__()
        w1, w2, w3 = widths
        s1, s2, self.residual = stride_plan(upsample)
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.widths = tuple(int(w) for w in widths)
        self.upsample = int(upsample)
        self.reduce = nn.Sequential(nn.Conv2d(in_channels, w1, 3, padding=1, bias=False),
                                    nn.BatchNorm2d(w1, momentum=0.1), nn.ReLU(inplace=True))
        self.up1 = nn.Sequential(_up_layer(w1, w2, s1), nn.BatchNorm2d(w2, momentum=0.1), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(_up_layer(w2, w3, s2), nn.BatchNorm2d(w3, momentum=0.1), nn.ReLU(inplace=True))
        self.classifier = nn.Conv2d(w3, num_classes, 1)
        nn.init.zeros_(self.classifier.bias)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.ndim != 4 or f.shape[1] != self.in_channels:
            raise ShapeError(f"head expects (N, {self.in_channels}, h, w), got {tuple(f.shape)}")
        logits = self.classifier(self.up2(self.up1(self.reduce(f))))
        if self.residual > 1:
            h, w = logits.shape[-2:]
            logits = bilinear_upsample(logits, (h * self.residual, w * self.residual))
        return logits

    def manifest(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "upsample": self.upsample,
            "stride_plan": list(stride_plan(self.upsample)),
            "parameters": count_parameters(self),
        }


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_head(in_channels: int, num_classes: int, feature_hw: int, image_hw: int,
               widths=DEFAULT_WIDTHS, seed: int = 0) -> FCNHead:
    """Head with the stride plan derived from feature and image side lengths."""
    if image_hw % feature_hw:
        raise ParameterError(f"image size {image_hw} is not a multiple of feature size {feature_hw}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = FCNHead(in_channels, num_classes, widths, image_hw // feature_hw)
    log.info("FCN head: %d parameters, stride plan %s", count_parameters(head),
             stride_plan(head.upsample))
    return head


def head_forward(head: FCNHead, f) -> torch.Tensor:
    """Logits ``(K, H, W)`` for a single :class:`FeatureMap` or ``(C, h, w)`` tensor."""
    values = f if isinstance(f, torch.Tensor) else f.values
    return head(values[None])[0]


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-3)


def predict_mask(logits: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax over the class axis (-3); ties go to the lowest class id."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    # torch.argmax returns the first maximal index on CPU
    return torch.argmax(logits, dim=-3).cpu().numpy().astype(np.int64)


@dataclass
class SegmentationMask:
    classes: np.ndarray
    num_classes: int
    ignore_index: int

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        valid = ((self.classes >= 0) & (self.classes < self.num_classes)) | (self.classes == self.ignore_index)
        if not valid.all():
            raise ValueError("mask contains ids outside [0, K) and the ignore index")


def save_head(head: FCNHead, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = head.manifest() | (extra or {})
    torch.save({"manifest": manifest, "state_dict": head.state_dict()}, path)
    return path


def load_head(path) -> tuple[FCNHead, dict]:
    try:
        blob = torch.load(Path(path), weights_only=True)
        m = blob["manifest"]
        head = FCNHead(m["in_channels"], m["num_classes"], m["widths"], m["upsample"])
        head.load_state_dict(blob["state_dict"])
    except (OSError, KeyError, RuntimeError) as exc:
        raise LoadError(f"cannot load head checkpoint {path}: {exc}") from exc
    head.eval()
    return head, m


DEFAULT_PALETTE = [
    (220, 20, 60), (255, 182, 193), (65, 105, 225), (50, 50, 50),
    (60, 179, 113), (255, 215, 0), (148, 0, 211), (0, 206, 209),
]
IGNORE_COLOR = (255, 255, 255)


def save_mask_png(mask: np.ndarray, path, class_names: list[str], ignore_index: int) -> Path:
    """Write an indexed (palette) PNG plus a ``<stem>.palette.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(mask.astype(np.uint8))  # "L"; putpalette turns it into "P"
    colors = [DEFAULT_PALETTE[i % len(DEFAULT_PALETTE)] for i in range(len(class_names))]
    flat = [0] * 768
    for idx, rgb in enumerate(colors):
        flat[3 * idx:3 * idx + 3] = rgb
    if 0 <= ignore_index < 256:
        flat[3 * ignore_index:3 * ignore_index + 3] = IGNORE_COLOR
    img.putpalette(flat)
    img.save(path)
    sidecar = {
        "classes": {str(i): {"name": n, "rgb": list(colors[i])} for i, n in enumerate(class_names)},
        "ignore_index": ignore_index,
    }
    path.with_suffix(".palette.json").write_text(json.dumps(sidecar, indent=2))
    return path
