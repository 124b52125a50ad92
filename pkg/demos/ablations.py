"""Run the three ablations (timestep, learning rate, block selection) on small settings.

Each sweep shares one backbone and one feature extraction per setting, and
writes a CSV plus (for timestep and blocks) a chart.

    python demos/ablations.py --out runs/ablations
"""

import argparse
import csv

from diffseg import config as cfgmod
from diffseg.experiments import plot_csv, run_block_sweep, run_lr_sweep, run_timestep_sweep

SMALL = [
    "dataset.n=4", "dataset.n_val=2", "dataset.size=192", "grid.patch=64", "grid.feature_size=16",
    "head.widths=[16,16,16]", "train.steps=40", "backbone.autoencoder_steps=50", "backbone.denoiser_steps=20",
]


def show(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(r[i]) if i == 0 else 8 for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [v[:8].rjust(8) for v in r[1:]]
        print("  " + "  ".join(cells))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--parallel", type=int, default=1)
    args = ap.parse_args()

    base = SMALL + [f"parallel={args.parallel}"]

    cfg = cfgmod.resolve(None, base + ["train.learning_rate=1e-3", f"output_dir={args.out}/timestep"])
    path = run_timestep_sweep(cfg, [0, 10, 50, 200, 1000])
    print("timestep sweep")
    show(path)

    cfg = cfgmod.resolve(None, base + [f"output_dir={args.out}/lr"])
    path = run_lr_sweep(cfg, [1e-3, 1e-4, 1e-5])
    plot_csv(path)
    print("learning-rate sweep")
    show(path)

    cfg = cfgmod.resolve(None, base + ["train.learning_rate=1e-3", f"output_dir={args.out}/blocks"])
    path = run_block_sweep(cfg)
    print("block sweep")
    show(path)


if __name__ == "__main__":
    main()
