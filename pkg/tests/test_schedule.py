import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg.errors import ParameterError, ShapeError, TimestepError
from diffseg.schedule import (Latent, NoiseSchedule, build_schedule, gaussian_noise, noise_latent,
                              seed_entropy)

# Π_{k=1..50} (1 − β_k), linear β from 1e-4 to 0.02 over 1000 steps, evaluated
# in exact rational arithmetic outside the package.
ALPHA_BAR_50 = 0.9710157229394405


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    assert s.num_steps == 1
    assert s.alpha_bar(1) == 0.5


def test_alpha_bar_50_default():
    s = build_schedule()
    assert s.alpha_bar(50) == pytest.approx(ALPHA_BAR_50, abs=1e-15)


def test_oracle_loop_matches():
    s = build_schedule()
    prod = 1.0
    for k in range(1, 51):
        prod *= 1 - (1e-4 + (0.02 - 1e-4) * (k - 1) / 999)
    assert s.alpha_bar(50) == pytest.approx(prod, rel=1e-13)


def test_lengths_and_ranges():
    s = build_schedule()
    assert len(s.betas) == len(s.alphas) == len(s.alpha_bars) == 1000
    assert s.betas[0] == 1e-4 and s.betas[-1] == pytest.approx(0.02)
    assert np.all((s.betas > 0) & (s.betas < 1))


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 2000), lo=st.floats(1e-6, 0.05), span=st.floats(0, 0.05))
def test_alpha_bar_strictly_decreasing(T, lo, span):
    s = build_schedule(T, lo, lo + span)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(s.alpha_bars > 0) and np.all(s.alpha_bars <= 1)
    assert np.allclose(np.sqrt(s.alpha_bars) ** 2 + np.sqrt(1 - s.alpha_bars) ** 2, 1, atol=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0),
                                  (2.5, 1e-4, 0.02)])
def test_invalid_schedule(args):
    with pytest.raises(ParameterError):
        build_schedule(*args)


def test_underflowing_schedule_rejected():
    # ᾱ would hit exactly 0.0 in float64, breaking strict monotonicity
    with pytest.raises(ParameterError):
        build_schedule(2000, 0.5, 0.9)


def test_schedule_immutable():
    s = build_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bars[0] = 0.5
    with pytest.raises(Exception):
        s.betas = np.ones(3)
    with pytest.raises(ParameterError):
        NoiseSchedule(np.array([0.1, 1.0]))


def test_zero_noise_scales(schedule, rng):
    z0 = Latent(torch.from_numpy(rng.standard_normal((4, 4, 4))))
    zt = noise_latent(z0, 50, schedule, torch.zeros(4, 4, 4, dtype=torch.float64))
    assert torch.equal(zt.values, np.sqrt(schedule.alpha_bar(50)) * z0.values)
    assert zt.timestep == 50


def test_zero_latent_is_pure_noise(schedule, rng):
    eps = torch.from_numpy(rng.standard_normal((4, 4, 4)))
    zt = noise_latent(Latent(torch.zeros(4, 4, 4, dtype=torch.float64)), 200, schedule, eps)
    assert torch.equal(zt.values, np.sqrt(1 - schedule.alpha_bar(200)) * eps)


def test_matched_noise_composition(schedule, rng):
    """50 single-step transitions collapse onto one closed-form draw.

    With ε_eff = (z_50 − √ᾱ z0)/√(1−ᾱ) the closed form reproduces the composed
    chain; over many chains ε_eff has zero mean and unit variance.
    """
    n, t = 20000, 50
    z0 = rng.standard_normal((4, 4, 4))
    z = np.broadcast_to(z0, (n, 4, 4, 4)).copy()
    for k in range(1, t + 1):
        b = schedule.betas[k - 1]
        z = np.sqrt(1 - b) * z + np.sqrt(b) * rng.standard_normal(z.shape)
    abar = schedule.alpha_bar(t)
    eps = (z - np.sqrt(abar) * z0) / np.sqrt(1 - abar)
    closed = noise_latent(Latent(torch.from_numpy(z0)), t, schedule, torch.from_numpy(eps[0]))
    np.testing.assert_allclose(closed.values.numpy(), z[0], atol=1e-12)
    # moments of the chain match the closed form to Monte-Carlo precision
    assert abs(eps.mean()) < 5 / np.sqrt(eps.size)
    assert abs(eps.var() - 1) < 5 * np.sqrt(2 / eps.size)


def test_timestep_errors(schedule):
    z0 = Latent(torch.zeros(4, 2, 2))
    for t in (0, -1, 1001, 2.5):
        with pytest.raises(TimestepError):
            noise_latent(z0, t, schedule, 0)
    with pytest.raises(ShapeError):
        noise_latent(z0, 10, schedule, torch.zeros(4, 2, 3))


def test_seeded_noise_deterministic(schedule):
    z0 = Latent(torch.ones(4, 8, 8))
    a = noise_latent(z0, 50, schedule, seed_entropy(3, "img-7", 2))
    b = noise_latent(z0, 50, schedule, seed_entropy(3, "img-7", 2))
    c = noise_latent(z0, 50, schedule, seed_entropy(3, "img-7", 3))
    assert torch.equal(a.values, b.values)
    assert not torch.equal(a.values, c.values)


def test_seed_entropy_stable():
    # string keys hash through sha256, so the entropy does not depend on PYTHONHASHSEED
    assert seed_entropy(0, "a") == [0, int.from_bytes(bytes.fromhex(
        "ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb")[:8], "little")]
    with pytest.raises(ParameterError):
        seed_entropy(-1)
    assert gaussian_noise((3,), 5).dtype == torch.float32


def test_latent_rejects_nonfinite():
    with pytest.raises(ValueError):
        Latent(torch.tensor([[[float("nan")]]]))
    with pytest.raises(ShapeError):
        Latent(torch.zeros(4, 4))
