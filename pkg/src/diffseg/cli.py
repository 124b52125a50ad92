"""``diffseg`` command line.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigError, ValidationError

log = logging.getLogger("diffseg")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--preset", choices=["desk"], help="reduced widths / feature size for CPU runs")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. train.steps=50 (repeatable)")
    p.add_argument("--out", help="output directory (output_dir)")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--timestep", type=int, help="diffusion timestep (default 50)")
    p.add_argument("--steps", type=int, help="training steps (default 200)")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--dataset", help="dataset name: synthetic | manifest | bcss | glas")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--parallel", type=int, help="concurrent sweep runs (default 1)")


def _resolve(args) -> dict:
    overrides = list(args.overrides)
    flag_keys = {
        "out": "output_dir", "lr": "train.learning_rate", "timestep": "diffusion.timestep",
        "steps": "train.steps", "seed": "seed", "dataset": "dataset.name",
        "manifest": "dataset.manifest", "parallel": "parallel",
    }
    for attr, dotted in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append((dotted, value))
    return cfgmod.resolve(args.config, overrides, args.preset)


def _csv_list(text: str, cast):
    return [cast(v) for v in text.split(",") if v.strip()]


def cmd_prepare_data(args) -> int:
    from . import data

    out = Path(args.out)
    if args.kind == "synthetic":
        m = data.generate_synthetic_dataset(args.n, args.num_classes, args.seed, out, n_val=args.n_val)
    else:
        raw = Path(args.raw) if args.raw else data.data_root()
        if raw is None:
            raise ConfigError(f"--raw or ${data.DATA_ROOT_ENV} is required for {args.kind}")
        if args.kind == "bcss":
            policy = data.RoiPatchPolicy(stride=args.stride, dontcare_threshold=args.threshold)
            table = json.loads(Path(args.class_map).read_text()) if args.class_map else None
            m = data.prepare_bcss(raw, out, policy, table, seed=args.seed)
        else:
            m = data.prepare_glas(raw, out)
    print(json.dumps({s: len(items) for s, items in m.splits.items()}))
    return 0


def cmd_train(args) -> int:
    from .experiments import run_training

    run = run_training(_resolve(args))
    print(run)
    return 0


def cmd_evaluate(args) -> int:
    from .experiments import evaluate

    result = evaluate(args.run, args.split, args.dump_masks, args.out, args.num_classes)
    print(json.dumps(result["aggregate"], indent=2))
    return 0


def cmd_sweep_timestep(args) -> int:
    from .experiments import run_timestep_sweep

    print(run_timestep_sweep(_resolve(args), _csv_list(args.values, int)))
    return 0


def cmd_sweep_lr(args) -> int:
    from .experiments import run_lr_sweep

    print(run_lr_sweep(_resolve(args), _csv_list(args.values, float)))
    return 0


def cmd_sweep_blocks(args) -> int:
    from .experiments import run_block_sweep

    selections = None
    if args.selections:
        selections = [s.split("+") if s else [] for s in args.selections.split(",")]
    print(run_block_sweep(_resolve(args), selections))
    return 0


def cmd_plot(args) -> int:
    from .experiments import plot_csv

    print(plot_csv(args.csv, args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="preprocess a raw corpus or synthesize one")
    p.add_argument("kind", choices=["synthetic", "bcss", "glas"])
    p.add_argument("--raw", help="raw dataset root (default $DIFFSEG_DATA_ROOT)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10, help="synthetic training images")
    p.add_argument("--n-val", type=int, default=2)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=400, help="BCSS window stride")
    p.add_argument("--threshold", type=float, default=0.90, help="BCSS don't-care threshold")
    p.add_argument("--class-map", help="JSON class table (default: bundled BCSS grouping)")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a segmentation head")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a run directory on a split")
    p.add_argument("run", help="run directory produced by `train`")
    p.add_argument("--split", default="val")
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--out")
    p.add_argument("--num-classes", type=int, help="fail unless the checkpoint predicts K classes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-timestep", help="ablate the noising timestep")
    _common(p)
    p.add_argument("--values", default="0,10,50,200,1000")
    p.set_defaults(func=cmd_sweep_timestep)

    p = sub.add_parser("sweep-lr", help="ablate the head learning rate")
    _common(p)
    p.add_argument("--values", default="1e-3,1e-4,1e-5")
    p.set_defaults(func=cmd_sweep_lr)

    p = sub.add_parser("sweep-blocks", help="ablate which UNet blocks feed the head")
    _common(p)
    p.add_argument("--selections", help="comma-separated selections, blocks joined by '+' "
                                        "(default: each block alone, then all)")
    p.set_defaults(func=cmd_sweep_blocks)

    p = sub.add_parser("plot", help="render a sweep CSV as a chart")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
