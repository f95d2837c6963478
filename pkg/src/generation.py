"""Mask generation processes: training-target construction and inference pipelines.

OI2M maps the query image latent to the mask latent in one UNet call. MN2M and MI2M run a
deterministic multi-step denoising loop that starts from Gaussian noise or from the image latent.
The network always predicts the clean mask latent.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Protocol, Sequence

import torch
import torch.nn.functional as F

from .codec import decode, encode, mask_scores, mask_to_rgb, threshold
from .errors import ConfigurationError, InvalidRangeError, ShapeMismatchError
from .models import GenerationConfig, Process, QueryFill, RunConfig
from .schedule import (
    NoiseSchedule,
    add_noise,
    eps_from_prediction,
    inference_timesteps,
    make_schedule,
    mix_image_as_noise,
    multi_resolution_noise,
    sample_noise,
)
from .unet import PreparedSupport, prepare_support

if TYPE_CHECKING:
    from .data import Episode

LOGGER = logging.getLogger(__name__)


class Predictor(Protocol):
    def __call__(
        self,
        query_input: torch.Tensor,
        supports: Sequence[PreparedSupport],
        timestep: int | None,
    ) -> torch.Tensor: ...


@dataclass(frozen=True)
class EncodedEpisode:
    query_image: torch.Tensor
    query_latent: torch.Tensor
    mask_latent: torch.Tensor | None
    supports: list[PreparedSupport]


@dataclass(frozen=True)
class TrainSample:
    query_input: torch.Tensor
    supports: list[PreparedSupport]
    target: torch.Tensor
    timestep: int | None

    def to(self, dtype: torch.dtype) -> "TrainSample":
        return replace(
            self,
            query_input=self.query_input.to(dtype),
            supports=[support.to(dtype) for support in self.supports],
            target=self.target.to(dtype),
        )


def encode_episode(
    query_image: torch.Tensor,
    query_mask: torch.Tensor | None,
    supports: Sequence[tuple[torch.Tensor, torch.Tensor]],
    run: RunConfig,
) -> EncodedEpisode:
    factor = run.codec_factor
    mask_latent = None
    if query_mask is not None:
        mask_latent = encode(mask_to_rgb(query_mask, query_image, run.supervision_form), factor)
    return EncodedEpisode(
        query_image=query_image,
        query_latent=encode(query_image, factor),
        mask_latent=mask_latent,
        supports=[prepare_support(image, mask, run.unet) for image, mask in supports],
    )


def encode_training_episode(episode: "Episode", run: RunConfig) -> EncodedEpisode:
    return encode_episode(episode.query_image, episode.query_mask, episode.supports, run)


def schedule_for(gen: GenerationConfig) -> NoiseSchedule:
    return make_schedule(gen.train_timesteps, gen.beta_start, gen.beta_end, gen.schedule_kind)


def query_input(z_q: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    return torch.cat([z_q, second])


def _fill(z_q: torch.Tensor, query_fill: QueryFill) -> torch.Tensor:
    return z_q if query_fill is QueryFill.IMAGE else torch.zeros_like(z_q)


def _draw_noise(
    shape: torch.Size, seed: int, gen: GenerationConfig, dtype: torch.dtype
) -> torch.Tensor:
    if gen.multires_noise:
        return multi_resolution_noise(tuple(shape), seed, dtype=dtype).eps
    return sample_noise(tuple(shape), seed, dtype=dtype).eps


def build_train_sample(
    encoded: EncodedEpisode,
    gen: GenerationConfig,
    sched: NoiseSchedule | None,
    rng: torch.Generator,
    query_fill: QueryFill = QueryFill.ZEROS,
) -> TrainSample:
    """Constructs the UNet input and clean-latent target for one episode."""
    if encoded.mask_latent is None:
        raise ShapeMismatchError("training samples need the query mask latent")
    z_q, z_mq = encoded.query_latent, encoded.mask_latent
    if z_q.shape != z_mq.shape:
        raise ShapeMismatchError(f"z_q {tuple(z_q.shape)} and z_mq {tuple(z_mq.shape)} differ")

    if gen.process is Process.OI2M:
        return TrainSample(query_input(z_q, _fill(z_q, query_fill)), encoded.supports, z_mq, None)

    if sched is None:
        raise ConfigurationError(f"{gen.process.value} needs a noise schedule")
    t = int(torch.randint(sched.T, (1,), generator=rng))
    if gen.process is Process.MN2M:
        seed = int(torch.randint(2**31 - 1, (1,), generator=rng))
        noisy = add_noise(z_mq, _draw_noise(z_mq.shape, seed, gen, z_mq.dtype), t, sched)
    else:
        noisy = mix_image_as_noise(z_mq, z_q, t, sched)
    return TrainSample(query_input(z_q, noisy), encoded.supports, z_mq, t)


def loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prediction.shape != target.shape:
        raise ShapeMismatchError(
            f"prediction {tuple(prediction.shape)} and target {tuple(target.shape)} differ"
        )
    return F.mse_loss(prediction, target)


def ddim_step(
    z_t: torch.Tensor, z_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Deterministic DDIM update from step ``t`` to ``t_prev``; ``t_prev == -1`` returns ẑ."""
    if not t > t_prev >= -1:
        raise InvalidRangeError(f"timesteps must satisfy t > t_prev >= -1, got t={t}, t_prev={t_prev}")
    if t_prev == -1:
        return z_hat
    eps_hat = eps_from_prediction(z_t, z_hat, t, sched)
    alpha_bar_prev = sched.alpha_bar(t_prev)
    return alpha_bar_prev**0.5 * z_hat + (1.0 - alpha_bar_prev) ** 0.5 * eps_hat


def _generate_latent(
    predictor: Predictor,
    encoded: EncodedEpisode,
    gen: GenerationConfig,
    query_fill: QueryFill,
    seed: int,
) -> torch.Tensor:
    z_q = encoded.query_latent
    if gen.process is Process.OI2M:
        return predictor(query_input(z_q, _fill(z_q, query_fill)), encoded.supports, None)

    sched = schedule_for(gen)
    timesteps = inference_timesteps(sched.T, gen.steps)
    if gen.process is Process.MN2M:
        z_t = _draw_noise(z_q.shape, seed, gen, z_q.dtype)
    else:
        z_t = z_q
    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        z_hat = predictor(query_input(z_q, z_t), encoded.supports, t)
        z_t = ddim_step(z_t, z_hat, t, t_prev, sched)
    return z_t


def infer_scores(
    predictor: Predictor,
    encoded: EncodedEpisode,
    gen: GenerationConfig,
    run: RunConfig,
    seed: int,
) -> torch.Tensor:
    """Foreground score map in [0, 1]; ensemble members are averaged before thresholding."""
    if gen.ensemble > 1 and gen.process is not Process.MN2M:
        raise ConfigurationError(f"ensemble > 1 is only supported for MN2M, not {gen.process.value}")
    scores = []
    for member in range(gen.ensemble):
        latent = _generate_latent(predictor, encoded, gen, run.query_fill, seed + member)
        image = decode(latent, run.codec_factor)
        scores.append(mask_scores(image, run.supervision_form, encoded.query_image))
    return torch.stack(scores).mean(dim=0)


def infer(
    predictor: Predictor,
    encoded: EncodedEpisode,
    gen: GenerationConfig,
    run: RunConfig,
    seed: int,
) -> torch.Tensor:
    return threshold(infer_scores(predictor, encoded, gen, run, seed), run.threshold)
