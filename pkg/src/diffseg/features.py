"""Pixel-aligned feature maps from UNet block activations.

Cache record layout (one record per patch, two files sharing a key stem):

``<key>.bin``
    raw little-endian float32 tensor, C-contiguous, shape ``(C, H, W)``.
``<key>.json``
    sidecar manifest with ``shape``, ``dtype`` (always ``"<f4"``),
    ``timestep``, ``seed``, ``descriptor_hash``, ``block_slices``
    (``{block_id: [start, stop]}``) and ``patch_position``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone, BlockActivation, as_image_batch
from .errors import ParameterError, ShapeError
from .schedule import Latent, NoiseSchedule, noise_latent, seed_entropy


@dataclass
class FeatureMap:
    values: torch.Tensor  # (C, H, W)
    block_slices: dict[str, tuple[int, int]]
    timestep: int
    patch_position: tuple[int, int] | None = None

    def __post_init__(self):
        spans = sorted(self.block_slices.values())
        pos = 0
        for start, stop in spans:
            if start != pos or stop <= start:
                raise ShapeError(f"block slices {self.block_slices} are not a disjoint cover")
            pos = stop
        if pos != self.values.shape[0]:
            raise ShapeError(f"block slices cover {pos} channels, tensor has {self.values.shape[0]}")

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    def block(self, block_id: str) -> torch.Tensor:
        start, stop = self.block_slices[block_id]
        return self.values[start:stop]


def bilinear_upsample(a: BlockActivation | torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Corner-aligned bilinear resize of a ``(c, h, w)`` map up to ``target``."""
    values = a.values if isinstance(a, BlockActivation) else a
    h, w = values.shape[-2:]
    H, W = target
    if H < h or W < w:
        raise ParameterError(f"cannot downsample {h}x{w} to {H}x{W}")
    if (H, W) == (h, w):
        return values.clone()
    squeeze = values.ndim == 3
    batch = values[None] if squeeze else values
    # align_corners: output corners sample the input corners exactly
    out = F.interpolate(batch, size=(H, W), mode="bilinear", align_corners=True)
    return out[0] if squeeze else out


def resolve_blocks(backbone: Backbone, selection) -> list[str]:
    """Selection (``"all"`` or iterable of ids) in descriptor order."""
    ids = backbone.descriptor.block_ids
    if selection is None or selection == "all":
        return list(ids)
    if isinstance(selection, str):
        selection = [selection]
    chosen = set(selection)
    if not chosen:
        raise ParameterError("block selection is empty")
    unknown = chosen - set(ids)
    if unknown:
        raise ParameterError(f"unknown block ids {sorted(unknown)}; valid: {ids}")
    return [b for b in ids if b in chosen]


def block_slices_for(backbone: Backbone, blocks: list[str]) -> dict[str, tuple[int, int]]:
    slices, pos = {}, 0
    for b in blocks:
        c = backbone.descriptor.channels_of(b)
        slices[b] = (pos, pos + c)
        pos += c
    return slices


def extract_batch(
    patches: torch.Tensor,
    backbone: Backbone,
    schedule: NoiseSchedule,
    t: int,
    blocks: list[str],
    noise_seeds: list,
    feature_size: int | None = None,
) -> torch.Tensor:
    """Features for a ``(B, 3, P, P)`` batch -> ``(B, C, S, S)``.

    Each sample gets its own conditioning, latent and noise; GroupNorm and
    attention act per sample, so samples never mix.
    """
    schedule.check_timestep(t, allow_zero=True)
    P = patches.shape[-1]
    S = feature_size or P
    y = backbone.encode_conditions(patches)
    z0 = backbone.encode_images(patches)
    if t > 0:
        z = torch.stack([
            noise_latent(Latent(z0[i], 0), t, schedule, list(noise_seeds[i])).values
            for i in range(z0.shape[0])
        ])
    else:
        z = z0
    taps = dict(zip(backbone.descriptor.block_ids, backbone.unet_taps(z, t, y)))
    return torch.cat([bilinear_upsample(taps[b], (S, S)) for b in blocks], dim=1)


def extract_features(
    x,
    backbone: Backbone,
    schedule: NoiseSchedule,
    t: int,
    block_selection="all",
    seed: int = 0,
    *,
    image_id=0,
    patch_index: int = 0,
    patch_position: tuple[int, int] | None = None,
    feature_size: int | None = None,
) -> FeatureMap:
    """Noise, tap and upsample a single ``(P, P, 3)`` patch.

    Noise is keyed by ``(seed, image_id, patch_index)``; ``t=0`` feeds the
    clean latent straight to the UNet.
    """
    blocks = resolve_blocks(backbone, block_selection)
    batch = as_image_batch(x)
    if batch.shape[-1] != batch.shape[-2]:
        raise ShapeError("patches must be square")
    values = extract_batch(
        batch, backbone, schedule, t, blocks,
        [seed_entropy(seed, image_id, patch_index)], feature_size,
    )[0]
    return FeatureMap(values, block_slices_for(backbone, blocks), int(t), patch_position)


def descriptor_hash(backbone: Backbone) -> str:
    h = hashlib.sha256(backbone.weight_hash().encode())
    h.update(json.dumps(backbone.descriptor.to_header(), sort_keys=True).encode())
    return h.hexdigest()[:16]


class FeatureCache:
    """On-disk per-patch feature store; writes are atomic renames."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(image_hash: str, t: int, seed: int, blocks: Iterable[str], desc_hash: str,
            feature_size: int, image_id, patch_index: int) -> str:
        block_hash = hashlib.sha256(",".join(blocks).encode()).hexdigest()[:12]
        raw = f"{image_hash}|{t}|{seed}|{block_hash}|{desc_hash}|{feature_size}|{image_id}|{patch_index}"
        return hashlib.sha256(raw.encode()).hexdigest()[:32]

    def get(self, key: str) -> FeatureMap | None:
        meta_path = self.root / f"{key}.json"
        bin_path = self.root / f"{key}.bin"
        if not meta_path.exists() or not bin_path.exists():
            return None
        meta = json.loads(meta_path.read_text())
        arr = np.fromfile(bin_path, dtype="<f4").reshape(meta["shape"])
        pos = meta.get("patch_position")
        return FeatureMap(
            torch.from_numpy(arr.astype(np.float32)),
            {k: tuple(v) for k, v in meta["block_slices"].items()},
            meta["timestep"],
            tuple(pos) if pos is not None else None,
        )

    def put(self, key: str, fm: FeatureMap, seed: int, desc_hash: str) -> None:
        arr = fm.values.detach().cpu().numpy().astype("<f4", copy=False)
        meta = {
            "shape": list(arr.shape),
            "dtype": "<f4",
            "timestep": fm.timestep,
            "seed": seed,
            "descriptor_hash": desc_hash,
            "block_slices": {k: list(v) for k, v in fm.block_slices.items()},
            "patch_position": list(fm.patch_position) if fm.patch_position else None,
        }
        # binary first, sidecar last: a reader only trusts records with a sidecar
        for suffix, payload in ((".bin", np.ascontiguousarray(arr).tobytes()),
                                (".json", json.dumps(meta).encode())):
            final = self.root / f"{key}{suffix}"
            tmp = final.with_name(f"{final.name}.{os.getpid()}.tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, final)
