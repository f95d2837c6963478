from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from src.errors import DegenerateTimestepError, InvalidRangeError, ShapeMismatchError
from src.models import ScheduleKind
from src.schedule import (
    NoiseSchedule,
    add_noise,
    eps_from_prediction,
    inference_timesteps,
    make_schedule,
    mix_image_as_noise,
    multi_resolution_noise,
    sample_noise,
)


def fixed_schedule(*alpha_bars: float) -> NoiseSchedule:
    alphas = torch.tensor(alpha_bars, dtype=torch.float64)
    return NoiseSchedule(betas=1.0 - alphas, alpha_bars=alphas)


def test_constant_schedule_products():
    sched = make_schedule(3, 0.1, 0.1, ScheduleKind.CONSTANT)
    assert torch.allclose(sched.alpha_bars, torch.tensor([0.9, 0.81, 0.729], dtype=torch.float64), atol=1e-15)


def test_alpha_bars_match_running_product_for_random_configs():
    rng = np.random.default_rng(0)
    kinds = list(ScheduleKind)
    for _ in range(100):
        T = int(rng.integers(1, 1200))
        lo, hi = sorted(rng.uniform(1e-5, 0.5, size=2))
        sched = make_schedule(T, float(lo), float(hi), kinds[int(rng.integers(len(kinds)))])
        running = 1.0
        expected = []
        for beta in sched.betas.tolist():
            running *= 1.0 - beta
            expected.append(running)
        assert np.max(np.abs(np.array(expected) - sched.alpha_bars.numpy())) < 1e-12
        assert bool((sched.alpha_bars[1:] < sched.alpha_bars[:-1]).all())


def test_scaled_linear_endpoints_are_pinned():
    sched = make_schedule(1000, 0.00085, 0.012)
    assert sched.kind is ScheduleKind.SCALED_LINEAR
    assert sched.betas[0].item() == 0.00085
    assert sched.betas[999].item() == 0.012
    assert sched.T == 1000


def test_tiny_betas_leave_alpha_bar_near_one():
    sched = make_schedule(5, 1e-12, 1e-12, ScheduleKind.LINEAR)
    assert torch.allclose(sched.alpha_bars, torch.ones(5, dtype=torch.float64), atol=1e-10)


def test_schedule_kinds_coincide_for_equal_endpoints():
    a = make_schedule(50, 0.02, 0.02, ScheduleKind.SCALED_LINEAR)
    b = make_schedule(50, 0.02, 0.02, ScheduleKind.LINEAR)
    assert torch.equal(a.alpha_bars, b.alpha_bars)


@pytest.mark.parametrize(
    "T,start,end",
    [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)],
)
def test_make_schedule_rejects_invalid_ranges(T, start, end):
    with pytest.raises(InvalidRangeError):
        make_schedule(T, start, end)


def test_alpha_bar_lookup():
    sched = make_schedule(4, 0.1, 0.1, ScheduleKind.CONSTANT)
    assert sched.alpha_bar(-1) == 1.0
    assert sched.alpha_bar(0) == pytest.approx(0.9)
    with pytest.raises(InvalidRangeError):
        sched.alpha_bar(4)


def test_add_noise_endpoints_are_exact():
    z = torch.randn(2, 3, 3)
    eps = torch.randn(2, 3, 3)
    sched = fixed_schedule(1.0, 0.0)
    assert torch.equal(add_noise(z, eps, 0, sched), z)
    assert torch.equal(add_noise(z, eps, 1, sched), eps)


def test_add_noise_quarter_alpha_bar():
    z = torch.tensor([1.0, -2.0], dtype=torch.float64)
    eps = torch.tensor([0.5, 3.0], dtype=torch.float64)
    out = add_noise(z, eps, 0, fixed_schedule(0.25))
    assert torch.allclose(out, 0.5 * z + math.sqrt(0.75) * eps, atol=1e-15)
    assert out[0].item() == pytest.approx(0.5 + 0.866025 * 0.5, abs=1e-6)


def test_add_noise_is_linear():
    sched = make_schedule(100, 0.00085, 0.012)
    z = torch.randn(4, 4, dtype=torch.float64)
    eps = torch.randn(4, 4, dtype=torch.float64)
    assert torch.allclose(add_noise(3.0 * z, 3.0 * eps, 40, sched), 3.0 * add_noise(z, eps, 40, sched))


def test_add_noise_accepts_noise_sample_and_checks_shapes():
    sched = make_schedule(10, 0.01, 0.02)
    z = torch.zeros(3, 2, 2)
    sample = sample_noise((3, 2, 2), seed=7)
    assert torch.equal(add_noise(z, sample, 3, sched), add_noise(z, sample.eps, 3, sched))
    with pytest.raises(ShapeMismatchError):
        add_noise(z, torch.zeros(3, 2, 3), 3, sched)
    with pytest.raises(InvalidRangeError):
        add_noise(z, sample, 10, sched)


def test_mix_image_as_noise():
    z_mq = torch.randn(2, 2)
    z_q = torch.randn(2, 2)
    assert torch.equal(mix_image_as_noise(z_mq, z_q, 0, fixed_schedule(1.0)), z_mq)
    out = mix_image_as_noise(torch.zeros(2, 2), z_q, 0, fixed_schedule(0.25))
    assert torch.allclose(out, math.sqrt(0.75) * z_q)

    strong = make_schedule(1000, 0.0272, 0.384)
    assert torch.allclose(mix_image_as_noise(z_mq, z_q, 999, strong), z_q, atol=1e-6)


def test_eps_from_prediction_round_trip():
    sched = make_schedule(1000, 0.00085, 0.012)
    z = torch.randn(12, 8, 8, dtype=torch.float64)
    eps = torch.randn(12, 8, 8, dtype=torch.float64)
    for t in (0, 10, 500, 999):
        z_t = add_noise(z, eps, t, sched)
        assert (eps_from_prediction(z_t, z, t, sched) - eps).abs().max() < 1e-6


def test_eps_from_prediction_scalar_oracle():
    z_t = torch.tensor([0.7, -0.2], dtype=torch.float64)
    z_hat = torch.tensor([0.1, 0.4], dtype=torch.float64)
    expected = (z_t - 0.5 * z_hat) / math.sqrt(0.75)
    assert torch.allclose(eps_from_prediction(z_t, z_hat, 0, fixed_schedule(0.25)), expected, atol=1e-15)
    assert torch.equal(eps_from_prediction(z_t, z_hat, 0, fixed_schedule(0.0)), z_t)


def test_eps_from_prediction_degenerate_timestep():
    with pytest.raises(DegenerateTimestepError):
        eps_from_prediction(torch.zeros(2), torch.zeros(2), 0, fixed_schedule(1.0))


def test_noise_is_seeded():
    assert torch.equal(sample_noise((4, 4), 3).eps, sample_noise((4, 4), 3).eps)
    assert not torch.equal(sample_noise((4, 4), 3).eps, sample_noise((4, 4), 4).eps)


def test_multi_resolution_noise():
    first = multi_resolution_noise((48, 16, 16), seed=1)
    second = multi_resolution_noise((48, 16, 16), seed=1)
    assert first.eps.shape == (48, 16, 16)
    assert torch.equal(first.eps, second.eps)
    assert first.eps.std().item() == pytest.approx(1.0, abs=1e-5)


def test_inference_timesteps():
    steps = inference_timesteps(1000, 50)
    assert steps[0] == 999 and steps[-1] == 0 and len(steps) == 50
    assert all(a > b for a, b in zip(steps, steps[1:]))
    assert inference_timesteps(1000, 1) == [999]
    with pytest.raises(InvalidRangeError):
        inference_timesteps(10, 11)
