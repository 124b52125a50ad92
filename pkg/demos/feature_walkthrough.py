"""Walk one synthetic image through the frozen feature pipeline.

Prints what happens at each stage: tiling, encoding, forward noising,
tapping the UNet decoder, upsampling and stitching.

    python demos/feature_walkthrough.py --size 768 --timestep 50
"""

import argparse

import numpy as np
import torch

from diffseg.backbone import build_toy_backbone
from diffseg.data import synthetic_samples
from diffseg.features import bilinear_upsample
from diffseg.grid import extract_image_features, tile
from diffseg.schedule import build_schedule, noise_latent, seed_entropy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=768, help="image side; the grid is always 3x3")
    ap.add_argument("--timestep", type=int, default=50)
    ap.add_argument("--feature-size", type=int, default=32, help="per-patch feature side")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    P = args.size // 3
    image, mask = next(synthetic_samples(1, 5, seed=args.seed, size=args.size))
    x = image.astype(np.float32) / 255.0
    print(f"image {x.shape}, mask classes {sorted(np.unique(mask).tolist())}")

    grid = tile(x, 3, P)
    print(f"tiled into {len(grid.patches)} patches of {grid.patches[0][1].shape}")

    # untrained toy weights: shapes are real, the latent scale is not calibrated until pre-training
    backbone = build_toy_backbone(args.seed, patch_size=P)
    desc = backbone.descriptor
    schedule = build_schedule()
    print(f"schedule: T={schedule.num_steps}, alpha_bar({args.timestep}) = {schedule.alpha_bar(args.timestep):.6f}")

    # one patch by hand
    (r, c), patch = grid.patches[0]
    z0 = backbone.encode_image(patch)
    print(f"patch ({r},{c}) latent {tuple(z0.values.shape)}")
    if args.timestep > 0:
        zt = noise_latent(z0, args.timestep, schedule, seed_entropy(args.seed, "demo", 0))
        drift = torch.linalg.vector_norm(zt.values - z0.values) / torch.linalg.vector_norm(z0.values)
        print(f"noised to t={args.timestep}: relative change {drift:.3f}")
    else:
        zt = z0
        print("t=0: the clean latent goes straight in")
    taps = backbone.run_unet_with_taps(zt, backbone.encode_condition(patch))
    for a in taps:
        up = bilinear_upsample(a, (args.feature_size, args.feature_size))
        print(f"  {a.block_id:7s} {tuple(a.values.shape)} -> {tuple(up.shape)}  stride {desc.block_strides()[a.block_id]}")

    fm = extract_image_features(x, backbone, schedule, args.timestep, "all", args.seed, image_id="demo",
                                feature_size=args.feature_size, G=3, P=P)
    print(f"stitched feature map {tuple(fm.values.shape)}")
    for b, (lo, hi) in fm.block_slices.items():
        print(f"  channels {lo:3d}:{hi:3d} <- {b}")
    print(f"UNet passes so far: {backbone.unet_calls}")


if __name__ == "__main__":
    main()
