"""Linear DDPM noise schedule and closed-form forward noising of latents."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from .errors import ParameterError, ShapeError, TimestepError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_TIMESTEP = 50


@dataclass(frozen=True)
class NoiseSchedule:
    """β, α = 1 − β and ᾱ_t = Π_{k≤t} α_k, stored 0-based (index t-1 holds step t)."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.array(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ParameterError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ParameterError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not (alpha_bars[-1] > 0 and np.all(np.diff(alpha_bars) < 0)):
            raise ParameterError("alpha_bar underflows to 0 in float64; shorten T or lower the betas")
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def num_steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t for 1-indexed t; ᾱ_0 = 1 by convention."""
        self.check_timestep(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def check_timestep(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if isinstance(t, bool) or int(t) != t or not lo <= t <= self.num_steps:
            raise TimestepError(f"timestep {t!r} outside [{lo}, {self.num_steps}]")


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


@dataclass
class Latent:
    """Latent tensor laid out channels-first ``(c, h, w)``; timestep 0 is the clean z0."""

    values: torch.Tensor
    timestep: int = 0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"latent must be (c, h, w), got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("latent contains non-finite values")


SeedLike = Union[int, Sequence[int]]


def seed_entropy(*keys) -> list[int]:
    """Turn a mix of ints and strings into SeedSequence entropy.

    Strings are hashed with sha256 so ids are stable across interpreter runs.
    """
    out = []
    for key in keys:
        if isinstance(key, (int, np.integer)):
            if key < 0:
                raise ParameterError("seed keys must be non-negative")
            out.append(int(key))
        else:
            digest = hashlib.sha256(str(key).encode()).digest()
            out.append(int.from_bytes(digest[:8], "little"))
    return out


def gaussian_noise(shape, seed: SeedLike, dtype=torch.float32) -> torch.Tensor:
    """Standard normal tensor drawn from a numpy generator seeded by ``seed``."""
    entropy = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)


def noise_latent(
    z0: Latent,
    t: int,
    schedule: NoiseSchedule,
    noise: torch.Tensor | SeedLike,
) -> Latent:
    """Sample z_t = sqrt(ᾱ_t) z0 + sqrt(1 − ᾱ_t) ε in one shot.

    ``noise`` is either an explicit ε with z0's shape or a seed for it.
    """
    schedule.check_timestep(t)
    if isinstance(noise, torch.Tensor):
        if noise.shape != z0.values.shape:
            raise ShapeError(
                f"noise shape {tuple(noise.shape)} != latent shape {tuple(z0.values.shape)}"
            )
        eps = noise.to(z0.values.dtype)
    else:
        eps = gaussian_noise(z0.values.shape, noise, dtype=z0.values.dtype)
    abar = schedule.alpha_bar(t)
    values = np.sqrt(abar) * z0.values + np.sqrt(1.0 - abar) * eps
    return Latent(values, timestep=int(t))
