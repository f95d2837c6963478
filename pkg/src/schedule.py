"""Forward diffusion: noise schedules and the noisy-latent algebra."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateTimestepError, InvalidRangeError, ShapeMismatchError
from .models import ScheduleKind


@dataclass(frozen=True)
class NoiseSchedule:
    """Betas and cumulative alpha products, both kept in float64. Index 0 is the least noisy step."""

    betas: torch.Tensor
    alpha_bars: torch.Tensor
    kind: ScheduleKind = ScheduleKind.SCALED_LINEAR

    @property
    def T(self) -> int:  # noqa: N802
        return int(self.betas.shape[0])

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t, with ᾱ_{-1} := 1 so the step after the last one is noiseless."""
        if t == -1:
            return 1.0
        _check_timestep(t, self)
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class NoiseSample:
    eps: torch.Tensor
    seed: int


def make_schedule(
    T: int,  # noqa: N803
    beta_start: float,
    beta_end: float,
    kind: ScheduleKind | str = ScheduleKind.SCALED_LINEAR,
) -> NoiseSchedule:
    kind = ScheduleKind(kind)
    if T < 1:
        raise InvalidRangeError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )

    if kind is ScheduleKind.CONSTANT or beta_start == beta_end:
        betas = torch.full((T,), beta_start, dtype=torch.float64)
    elif kind is ScheduleKind.LINEAR:
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    else:
        betas = torch.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=torch.float64) ** 2
    # Pin the endpoints; squaring a square root is not exact.
    betas[0] = beta_start
    if T > 1 and kind is not ScheduleKind.CONSTANT:
        betas[-1] = beta_end

    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, kind=kind)


def sample_noise(
    shape: torch.Size | tuple[int, ...], seed: int, dtype: torch.dtype = torch.float32
) -> NoiseSample:
    generator = torch.Generator().manual_seed(seed)
    return NoiseSample(eps=torch.randn(tuple(shape), generator=generator, dtype=dtype), seed=seed)


def multi_resolution_noise(
    shape: torch.Size | tuple[int, ...],
    seed: int,
    strength: float = 0.9,
    dtype: torch.dtype = torch.float32,
) -> NoiseSample:
    """Annealed pyramid noise for a ``(c, h, w)`` latent, rescaled to unit standard deviation."""
    channels, height, width = shape
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn((1, channels, height, width), generator=generator, dtype=dtype)
    level_h, level_w = height, width
    for level in range(1, 10):
        level_h, level_w = max(1, level_h // 2), max(1, level_w // 2)
        coarse = torch.randn((1, channels, level_h, level_w), generator=generator, dtype=dtype)
        noise = noise + F.interpolate(coarse, size=(height, width), mode="bilinear") * strength**level
        if level_h == 1 or level_w == 1:
            break
    noise = noise / noise.std()
    return NoiseSample(eps=noise[0], seed=seed)


def inference_timesteps(T: int, steps: int) -> list[int]:  # noqa: N803
    """Evenly spaced timestep indices from T-1 down to 0."""
    if not 1 <= steps <= T:
        raise InvalidRangeError(f"steps must lie in [1, {T}], got {steps}")
    spaced = np.linspace(T - 1, 0, steps).round().astype(np.int64)
    return [int(t) for t in spaced]


def add_noise(
    z: torch.Tensor, eps: torch.Tensor | NoiseSample, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """√ᾱ_t·z + √(1−ᾱ_t)·ε."""
    noise = eps.eps if isinstance(eps, NoiseSample) else eps
    if noise.shape != z.shape:
        raise ShapeMismatchError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(z.shape)}")
    alpha_bar = sched.alpha_bar(t)
    return math.sqrt(alpha_bar) * z + math.sqrt(1.0 - alpha_bar) * noise.to(z.dtype)


def mix_image_as_noise(
    z_mq: torch.Tensor, z_q: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Forward process with the query image latent standing in for the noise."""
    return add_noise(z_mq, z_q, t, sched)


def eps_from_prediction(
    z_t: torch.Tensor, z_hat: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Noise implied by a clean-latent prediction: (z_t − √ᾱ_t·ẑ) / √(1−ᾱ_t)."""
    if z_t.shape != z_hat.shape:
        raise ShapeMismatchError(f"z_t shape {tuple(z_t.shape)} != z_hat shape {tuple(z_hat.shape)}")
    alpha_bar = sched.alpha_bar(t)
    if alpha_bar >= 1.0:
        raise DegenerateTimestepError(f"alpha_bar at t={t} is 1; the implied noise is undefined")
    return (z_t - math.sqrt(alpha_bar) * z_hat) / math.sqrt(1.0 - alpha_bar)


def _check_timestep(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.T:
        raise InvalidRangeError(f"timestep {t} outside [0, {sched.T})")
