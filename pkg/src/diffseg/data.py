"""Dataset ingestion, BCSS/GlaS-style preprocessing and a synthetic corpus.

On-disk layout written by the ``prepare_*`` / synthetic generators::

    <out>/manifest.json
    <out>/images/<split>/<id>.png   RGB uint8
    <out>/masks/<split>/<id>.png    single-channel 8-bit labels; ignore_index marks "don't care"

Manifest schema (JSON)::

    {"name": str, "num_classes": K, "ignore_index": int,
     "class_names": [str, ...],
     "splits": {"train": [{"id": str, "image": rel, "mask": rel}, ...], ...},
     "class_map": {source_label: target_class_or_"ignore"} | null,
     "patching": {...policy...} | null}
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.spatial import cKDTree

from .errors import ConfigError, LoadError, MappingError, ParameterError

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "DIFFSEG_DATA_ROOT"
IGNORE = "ignore"


@dataclass
class RoiPatchPolicy:
    window: int = 800
    stride: int = 400
    dontcare_threshold: float = 0.90
    crop: int = 768

    def __post_init__(self):
        if not 0 < self.crop <= self.window:
            raise ParameterError("need 0 < crop <= window")
        if not 0 < self.dontcare_threshold <= 1:
            raise ParameterError("dontcare_threshold must be in (0, 1]")
        if self.stride < 1:
            raise ParameterError("stride must be positive")


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    ignore_index: int
    class_names: list[str]
    splits: dict[str, list[dict]] = field(default_factory=dict)
    class_map: dict | None = None
    patching: dict | None = None
    root: Path | None = None

    def items(self, split: str) -> list[dict]:
        if split not in self.splits:
            raise ConfigError(f"dataset {self.name!r} has no split {split!r}")
        return self.splits[split]

    def load_split(self, split: str) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """``(id, image uint8 (H, W, 3), mask int64 (H, W))`` per item."""
        out = []
        for item in self.items(split):
            img = np.asarray(Image.open(self.root / item["image"]).convert("RGB"))
            mask = np.asarray(Image.open(self.root / item["mask"])).astype(np.int64)
            out.append((item["id"], img, mask))
        return out

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        d = asdict(self)
        d.pop("root")
        path.write_text(json.dumps(d, indent=2))
        return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    m = DatasetManifest(root=path.parent, **d)
    for split, items in m.splits.items():
        for item in items:
            for key in ("image", "mask"):
                if not (m.root / item[key]).exists():
                    raise LoadError(f"{split}/{item['id']}: missing {item[key]}")
    return m


def data_root(default=None) -> Path | None:
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else (Path(default) if default else None)


# Class remapping ------------------------------------------------------------

def bcss_default_table() -> dict:
    """Default 22 -> 5 BCSS grouping; a convention, editable in resources/bcss_classes.json."""
    raw = resources.files("diffseg").joinpath("resources/bcss_classes.json").read_text()
    return json.loads(raw)


def remap_classes(mask, class_map: dict, num_classes: int, ignore_index: int | None = None,
                  strict: bool = True) -> np.ndarray:
    """Map raw labels to ``[0, K) ∪ {ignore}``.

    ``class_map`` values are target ids or ``"ignore"``.  Unmapped labels raise
    :class:`MappingError` when ``strict``, otherwise they become ignore.
    """
    ignore = num_classes if ignore_index is None else ignore_index
    mask = np.asarray(mask)
    lut = {int(k): (ignore if v == IGNORE else int(v)) for k, v in class_map.items()}
    for v in lut.values():
        if v != ignore and not 0 <= v < num_classes:
            raise MappingError(f"target class {v} outside [0, {num_classes})")
    labels = np.unique(mask)
    unmapped = [int(l) for l in labels if int(l) not in lut]
    if unmapped and strict:
        raise MappingError(f"labels {unmapped} have no mapping")
    out = np.full(mask.shape, ignore, dtype=np.int64)
    for l in labels:
        if int(l) in lut:
            out[mask == l] = lut[int(l)]
    return out


# ROI patching -----------------------------------------------------------------

def window_origins(size: int, window: int, stride: int) -> list[int]:
    if size < window:
        return []
    return list(range(0, size - window + 1, stride))


def extract_roi_patches(image: np.ndarray, mask: np.ndarray, policy: RoiPatchPolicy,
                        seed=0, *, ignore_index: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sliding windows, don't-care filter, one seeded random crop per kept window.

    A window is dropped when its don't-care fraction is strictly above the
    threshold.
    """
    H, W = mask.shape
    if image.shape[:2] != (H, W):
        raise ParameterError("image and mask sizes differ")
    if H < policy.window or W < policy.window:
        warnings.warn(f"ROI {H}x{W} smaller than window {policy.window}; skipped",
                      RuntimeWarning, stacklevel=2)
        return []
    rng = np.random.default_rng(seed)
    area = policy.window**2
    out = []
    for y in window_origins(H, policy.window, policy.stride):
        for x in window_origins(W, policy.window, policy.stride):
            win_mask = mask[y:y + policy.window, x:x + policy.window]
            if np.count_nonzero(win_mask == ignore_index) / area > policy.dontcare_threshold:
                continue
            dy, dx = rng.integers(0, policy.window - policy.crop + 1, size=2)
            sl = (slice(y + dy, y + dy + policy.crop), slice(x + dx, x + dx + policy.crop))
            out.append((image[sl].copy(), win_mask[dy:dy + policy.crop, dx:dx + policy.crop].copy()))
    return out


def resize_to_target(image: np.ndarray, mask: np.ndarray, target: int = 768) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear image resize, nearest-neighbour mask resize, both to ``target``²."""
    if image.shape[:2] == (target, target) and mask.shape == (target, target):
        return image, mask
    dtype = image.dtype
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    x = F.interpolate(x, size=(target, target), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
    if dtype == np.uint8:
        x = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    m = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.int64))[None, None].float()
    m = F.interpolate(m, size=(target, target), mode="nearest")[0, 0].numpy().astype(np.int64)
    return x, m


# Synthetic corpus -------------------------------------------------------------

CLASS_COLORS = np.array([
    [0.78, 0.35, 0.60],  # dense purple
    [0.95, 0.70, 0.80],  # pale pink
    [0.45, 0.30, 0.75],  # blue-violet
    [0.55, 0.15, 0.25],  # dark red
    [0.95, 0.92, 0.85],  # near white
    [0.30, 0.55, 0.45],
    [0.85, 0.55, 0.25],
    [0.20, 0.25, 0.45],
])
IGNORE_COLOR = np.array([0.70, 0.70, 0.70])
SYNTH_CLASS_NAMES = ["tumor", "stroma", "inflammatory", "necrosis", "other"]


def default_priors(K: int) -> np.ndarray:
    p = 1.0 / np.arange(1, K + 1) ** 0.7
    return p / p.sum()


def synthesize_pair(rng: np.random.Generator, K: int, size: int = 768, priors=None,
                    n_regions: int = 12, ignore_fraction: float = 0.1,
                    ignore_index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One image/mask pair: Voronoi regions, each labelled from ``priors``.

    A region is don't-care with probability ``ignore_fraction``; otherwise its
    class is drawn from ``priors``, so expected class area fractions among
    labelled pixels equal the priors.  Each class has a base colour and a
    class-specific blob texture.
    """
    ignore = K if ignore_index is None else ignore_index
    priors = default_priors(K) if priors is None else np.asarray(priors, dtype=np.float64)
    if K > len(CLASS_COLORS):
        raise ParameterError(f"synthetic generator supports at most {len(CLASS_COLORS)} classes")
    seeds = rng.uniform(0, size, size=(n_regions, 2))
    region_class = rng.choice(K, size=n_regions, p=priors)
    region_class[rng.random(n_regions) < ignore_fraction] = ignore
    yy, xx = np.mgrid[0:size, 0:size]
    _, nearest = cKDTree(seeds).query(np.stack([yy.ravel(), xx.ravel()], axis=1))
    mask = region_class[nearest].reshape(size, size).astype(np.int64)

    coarse = rng.standard_normal((size // 16, size // 16, 3))
    texture = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)
    img = np.empty((size, size, 3))
    for c in range(K):
        sel = mask == c
        # texture amplitude and pixel noise differ per class
        img[sel] = CLASS_COLORS[c] + (0.02 + 0.02 * c) * texture[sel]
    img[mask == ignore] = IGNORE_COLOR
    img += 0.03 * rng.standard_normal(img.shape)
    image = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    return image, mask


def synthetic_samples(n: int, K: int = 5, seed: int = 0, size: int = 768, **kw):
    if n < 1 or K < 2:
        raise ParameterError("need n >= 1 and K >= 2")
    ss = np.random.SeedSequence(seed)
    for child in ss.spawn(n):
        yield synthesize_pair(np.random.default_rng(child), K, size, **kw)


def _write_pair(root: Path, split: str, item_id: str, image: np.ndarray, mask: np.ndarray) -> dict:
    img_rel = Path("images") / split / f"{item_id}.png"
    mask_rel = Path("masks") / split / f"{item_id}.png"
    for rel in (img_rel, mask_rel):
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(root / img_rel)
    Image.fromarray(mask.astype(np.uint8)).save(root / mask_rel)
    return {"id": item_id, "image": img_rel.as_posix(), "mask": mask_rel.as_posix()}


def generate_synthetic_dataset(n: int, K: int = 5, seed: int = 0, root=None, size: int = 768,
                               n_val: int = 2, **kw) -> DatasetManifest:
    """Write ``n`` training and ``n_val`` validation synthetic pairs under ``root``."""
    if root is None:
        raise ParameterError("synthetic datasets need an output directory")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "val": []}
    for i, (image, mask) in enumerate(synthetic_samples(n + n_val, K, seed, size, **kw)):
        split = "train" if i < n else "val"
        splits[split].append(_write_pair(root, split, f"synth_{i:04d}", image, mask))
    names = (SYNTH_CLASS_NAMES + [f"class_{i}" for i in range(5, K)])[:K]
    m = DatasetManifest(f"synthetic-{K}", K, K, names, splits, None, None, root)
    m.save()
    return m


# Real corpora -----------------------------------------------------------------

def prepare_bcss(raw_root, out, policy: RoiPatchPolicy | None = None, class_map=None,
                 seed: int = 0, splits: dict | None = None) -> DatasetManifest:
    """BCSS-style ROIs: ``raw_root/images/<stem>.png`` + ``raw_root/masks/<stem>.png``.

    ``splits`` maps split name -> list of stems; default reads
    ``raw_root/splits.json`` if present, else everything is ``train``.
    """
    raw_root, out = Path(raw_root), Path(out)
    policy = policy or RoiPatchPolicy()
    table = class_map or bcss_default_table()
    names, mapping = table["classes"], table["map"]
    K = len(names)
    stems = sorted(p.stem for p in (raw_root / "images").glob("*.png"))
    if not stems:
        raise LoadError(f"no ROI images under {raw_root / 'images'}")
    if splits is None:
        split_file = raw_root / "splits.json"
        splits = json.loads(split_file.read_text()) if split_file.exists() else {"train": stems}
    result = {}
    for split, members in splits.items():
        result[split] = []
        for stem in members:
            image = np.asarray(Image.open(raw_root / "images" / f"{stem}.png").convert("RGB"))
            raw_mask = np.asarray(Image.open(raw_root / "masks" / f"{stem}.png"))
            mask = remap_classes(raw_mask, mapping, K, K, strict=False)
            patches = extract_roi_patches(image, mask, policy, seed=[seed, len(result[split])], ignore_index=K)
            for j, (pi, pm) in enumerate(patches):
                result[split].append(_write_pair(out, split, f"{stem}_{j:03d}", pi, pm))
    m = DatasetManifest("bcss", K, K, names, result, mapping, asdict(policy), out)
    m.save()
    return m


def prepare_glas(raw_root, out, target: int = 768) -> DatasetManifest:
    """GlaS layout ``<prefix>_<n>.bmp`` + ``<prefix>_<n>_anno.bmp``; binary gland masks.

    Prefixes ``train``, ``testA`` and ``testB`` become splits of the same name.
    """
    raw_root, out = Path(raw_root), Path(out)
    result: dict[str, list] = {}
    for img_path in sorted(raw_root.glob("*.bmp")):
        if img_path.stem.endswith("_anno"):
            continue
        anno = img_path.with_name(f"{img_path.stem}_anno.bmp")
        if not anno.exists():
            raise LoadError(f"missing annotation for {img_path.name}")
        split = img_path.stem.split("_")[0]
        image = np.asarray(Image.open(img_path).convert("RGB"))
        mask = (np.asarray(Image.open(anno)) > 0).astype(np.int64)
        if mask.ndim == 3:
            mask = mask[..., 0]
        image, mask = resize_to_target(image, mask, target)
        result.setdefault(split, []).append(_write_pair(out, split, img_path.stem, image, mask))
    if not result:
        raise LoadError(f"no GlaS images under {raw_root}")
    m = DatasetManifest("glas", 2, 2, ["background", "gland"], result, None, {"resize": target}, out)
    m.save()
    return m
