"""Layered run configuration: defaults < config file < ``key.path=value`` overrides.

Relative dataset paths resolve against ``$DIFFSEG_DATA_ROOT`` when it is set.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "cache_dir": None,
    "parallel": 1,
    "dataset": {
        "name": "synthetic",  # synthetic | manifest | bcss | glas
        "manifest": None,
        "root": None,
        "n": 10,
        "n_val": 2,
        "num_classes": 5,
        "size": 768,
        "seed": 0,
        "train_split": "train",
        "val_split": "val",
    },
    "backbone": {
        "path": None,  # None builds the toy backbone from `seed`
        "seed": 0,
        "conditioning": "ssl",  # ssl | none
        "autoencoder_steps": 400,  # reconstruction pre-training before freezing
        "denoiser_steps": 150,  # noise-prediction pre-training before freezing
    },
    "diffusion": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "timestep": 50},
    "grid": {"size": 3, "patch": 256, "feature_size": 256},
    "head": {"widths": [256, 128, 64]},
    "train": {
        "learning_rate": 1e-4,
        "steps": 200,
        "batch_size": 2,
        "seed": 0,
        "blocks": "all",
        "loss_weighting": None,  # None: frequency for BCSS-like data, uniform for GlaS
        "checkpoint_every_epoch": True,
    },
    "metrics": {"f1_average": "macro", "exclude_classes": []},
}

# Features at the latent resolution (32² per 256² patch); the head upsamples ×8.
DESK_PRESET = {
    "grid": {"feature_size": 32},
}

DATASET_NAMES = ("synthetic", "manifest", "bcss", "glas")
LATENT_FACTOR = 8


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {key} is not a section")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key.path=value")
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" (no dot) as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def resolve(file=None, overrides=(), preset: str | None = None, base: dict | None = None) -> dict:
    cfg = copy.deepcopy(base or DEFAULTS)
    if preset == "desk":
        cfg = deep_merge(cfg, DESK_PRESET)
    elif preset is not None:
        raise ConfigError(f"unknown preset {preset!r}")
    if file:
        cfg = deep_merge(cfg, load_file(file))
    for item in overrides:
        key, value = item if isinstance(item, tuple) else parse_override(item)
        set_dotted(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["name"] not in DATASET_NAMES:
        raise ConfigError(f"unknown dataset {ds['name']!r}; expected one of {DATASET_NAMES}")
    if ds["name"] != "synthetic" and not ds.get("manifest"):
        raise ConfigError(f"dataset {ds['name']!r} needs dataset.manifest (run prepare-data)")
    d = cfg["diffusion"]
    if not 0 < d["beta_start"] <= d["beta_end"] < 1:
        raise ConfigError("need 0 < diffusion.beta_start <= diffusion.beta_end < 1")
    if not 0 <= int(d["timestep"]) <= int(d["T"]):
        raise ConfigError(f"diffusion.timestep {d['timestep']} outside [0, {d['T']}]")
    tr = cfg["train"]
    if not tr["learning_rate"] > 0:
        raise ConfigError("train.learning_rate must be positive")
    if tr["loss_weighting"] not in (None, "frequency", "uniform"):
        raise ConfigError(f"unknown train.loss_weighting {tr['loss_weighting']!r}")
    g = cfg["grid"]
    if g["patch"] % g["feature_size"]:
        raise ConfigError("grid.patch must be a multiple of grid.feature_size")
    if g["feature_size"] < g["patch"] // LATENT_FACTOR:
        # features are only ever upsampled from the latent grid
        raise ConfigError(f"grid.feature_size must be at least patch/{LATENT_FACTOR} = {g['patch'] // LATENT_FACTOR}")
    if len(cfg["head"]["widths"]) != 3:
        raise ConfigError("head.widths needs three entries")
    if cfg["backbone"]["conditioning"] not in ("ssl", "none"):
        raise ConfigError("backbone.conditioning must be 'ssl' or 'none'")


def dump(cfg: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg, indent=2, default=str))
    return path
