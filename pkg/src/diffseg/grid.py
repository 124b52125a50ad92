"""Split a square image into a G×G grid of patches and stitch per-patch features back.

Stitching is a spatial mosaic: the feature map of patch (r, c) lands in block
(r, c) of the output.  Channels are the per-patch block concatenation, the
same in every patch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import Backbone, as_image_batch
from .errors import GridError, ShapeError
from .features import (
    FeatureCache,
    FeatureMap,
    block_slices_for,
    descriptor_hash,
    extract_batch,
    resolve_blocks,
)
from .schedule import NoiseSchedule, seed_entropy

DEFAULT_GRID = 3
DEFAULT_PATCH = 256


@dataclass
class PatchGrid:
    grid_size: int
    patch_size: int
    patches: list[tuple[tuple[int, int], np.ndarray]]

    def __post_init__(self):
        if len(self.patches) != self.grid_size**2:
            raise GridError(f"expected {self.grid_size**2} patches, got {len(self.patches)}")

    def stack(self) -> np.ndarray:
        return np.stack([p for _, p in self.patches])


def tile(x: np.ndarray, G: int = DEFAULT_GRID, P: int = DEFAULT_PATCH) -> PatchGrid:
    """Row-major, non-overlapping ``P``-sized patches of a ``(G·P, G·P, C)`` image."""
    if x.ndim != 3 or x.shape[0] != G * P or x.shape[1] != G * P:
        raise ShapeError(f"image of shape {x.shape} is not ({G * P}, {G * P}, C)")
    patches = [
        ((r, c), x[r * P:(r + 1) * P, c * P:(c + 1) * P])
        for r in range(G)
        for c in range(G)
    ]
    return PatchGrid(G, P, patches)


def stitch_features(grids: list[tuple[tuple[int, int], FeatureMap]]) -> FeatureMap:
    """Mosaic per-patch ``(C, S, S)`` maps into one ``(C, G·S, G·S)`` map."""
    if not grids:
        raise GridError("nothing to stitch")
    positions = [tuple(pos) for pos, _ in grids]
    if len(set(positions)) != len(positions):
        raise GridError("duplicate patch positions")
    G = int(round(len(grids) ** 0.5))
    if G * G != len(grids) or set(positions) != {(r, c) for r in range(G) for c in range(G)}:
        raise GridError(f"positions {sorted(positions)} do not form a complete grid")
    first = grids[0][1]
    C, S, S2 = first.values.shape
    if S != S2:
        raise ShapeError("patch feature maps must be square")
    out = torch.empty((C, G * S, G * S), dtype=first.values.dtype)
    for (r, c), fm in grids:
        if fm.values.shape != first.values.shape:
            raise ShapeError(
                f"feature map at {(r, c)} has shape {tuple(fm.values.shape)}, expected {tuple(first.values.shape)}"
            )
        if fm.block_slices != first.block_slices or fm.timestep != first.timestep:
            raise ShapeError(f"feature map at {(r, c)} has inconsistent metadata")
        out[:, r * S:(r + 1) * S, c * S:(c + 1) * S] = fm.values
    return FeatureMap(out, dict(first.block_slices), first.timestep)


def image_hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest()[:32]


def extract_image_features(
    x: np.ndarray,
    backbone: Backbone,
    schedule: NoiseSchedule,
    t: int,
    block_selection="all",
    seed: int = 0,
    *,
    image_id=0,
    G: int = DEFAULT_GRID,
    P: int = DEFAULT_PATCH,
    feature_size: int | None = None,
    cache: FeatureCache | None = None,
) -> FeatureMap:
    """Tile, extract every patch independently (own conditioning and noise), stitch."""
    grid = tile(x, G, P)
    blocks = resolve_blocks(backbone, block_selection)
    slices = block_slices_for(backbone, blocks)
    S = feature_size or P
    results: dict[int, FeatureMap] = {}
    keys = {}
    if cache is not None:
        dh = descriptor_hash(backbone)
        for i, (pos, patch) in enumerate(grid.patches):
            keys[i] = cache.key(image_hash(patch), t, seed, blocks, dh, S, image_id, i)
            hit = cache.get(keys[i])
            if hit is not None:
                results[i] = hit
    todo = [i for i in range(len(grid.patches)) if i not in results]
    if todo:
        batch = as_image_batch(np.stack([grid.patches[i][1] for i in todo]))
        seeds = [seed_entropy(seed, image_id, i) for i in todo]
        values = extract_batch(batch, backbone, schedule, t, blocks, seeds, S)
        for j, i in enumerate(todo):
            fm = FeatureMap(values[j], slices, int(t), grid.patches[i][0])
            results[i] = fm
            if cache is not None:
                cache.put(keys[i], fm, seed, dh)
    return stitch_features([(grid.patches[i][0], results[i]) for i in range(len(grid.patches))])
