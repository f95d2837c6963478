"""Image/latent codec, mask supervision forms and post-processing.

The codec is an exact space-to-depth rearrangement: each ``f×f×3`` pixel block becomes one latent
site with ``3f²`` channels, so ``decode(encode(I)) == I`` bit for bit.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import MissingOriginalError, ShapeMismatchError
from .models import SupervisionForm, ThresholdConfig, ThresholdMode

DEFAULT_FACTOR = 4
# Channel-mean brightness at or above this counts as fully lit for the real-pixel forms.
LIT_FLOOR = 0.05


def encode(image: torch.Tensor, factor: int = DEFAULT_FACTOR) -> torch.Tensor:
    """``(3, H, W)`` image -> ``(3f², H/f, W/f)`` latent. A leading batch axis is allowed."""
    if image.shape[-3] != 3:
        raise ShapeMismatchError(f"expected 3 image channels, got {image.shape[-3]}")
    height, width = image.shape[-2:]
    if height % factor or width % factor:
        raise ShapeMismatchError(
            f"image size {height}x{width} is not divisible by codec factor {factor}"
        )
    return F.pixel_unshuffle(image, factor)


def decode(latent: torch.Tensor, factor: int = DEFAULT_FACTOR) -> torch.Tensor:
    """Inverse of :func:`encode`, clamped to [0, 1]."""
    channels = latent.shape[-3]
    if channels != 3 * factor**2:
        raise ShapeMismatchError(f"expected {3 * factor**2} latent channels, got {channels}")
    return F.pixel_shuffle(latent, factor).clamp(0.0, 1.0)


def resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of an ``(H, W)`` mask; a cell is set iff its source pixel is."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask.bool()
    resized = F.interpolate(mask[None, None].float(), size=size, mode="nearest")
    return resized[0, 0] > 0.5


def mask_to_rgb(
    mask: torch.Tensor, image: torch.Tensor, form: SupervisionForm | str
) -> torch.Tensor:
    """Renders an ``(H, W)`` binary mask as an RGB supervision image."""
    form = SupervisionForm(form)
    if tuple(mask.shape) != tuple(image.shape[-2:]):
        raise ShapeMismatchError(
            f"mask shape {tuple(mask.shape)} does not match image size {tuple(image.shape[-2:])}"
        )
    mask_rgb = mask.to(image.dtype).unsqueeze(0).expand_as(image)
    if form is SupervisionForm.WHITE_ON_BLACK:
        return mask_rgb.clone()
    if form is SupervisionForm.REAL_FG_BLACK_BG:
        return image * mask_rgb
    if form is SupervisionForm.BLACK_FG_REAL_BG:
        return image * (1.0 - mask_rgb)
    return 0.5 * image + 0.5 * mask_rgb


def mask_scores(
    pred: torch.Tensor,
    form: SupervisionForm | str,
    original: torch.Tensor | None = None,
) -> torch.Tensor:
    """Single-channel foreground score in [0, 1] from a decoded RGB prediction."""
    form = SupervisionForm(form)
    pred = pred.clamp(0.0, 1.0)
    if form is SupervisionForm.WHITE_ON_BLACK:
        return pred.mean(dim=-3)
    if form is SupervisionForm.REAL_FG_BLACK_BG:
        return (pred.mean(dim=-3) / LIT_FLOOR).clamp(max=1.0)
    if form is SupervisionForm.BLACK_FG_REAL_BG:
        # Foreground is rendered black here, so brightness scores the background.
        return 1.0 - (pred.mean(dim=-3) / LIT_FLOOR).clamp(max=1.0)
    if original is None:
        raise MissingOriginalError("mask_over_image decoding needs the original image")
    if original.shape != pred.shape:
        raise ShapeMismatchError(
            f"original shape {tuple(original.shape)} != prediction shape {tuple(pred.shape)}"
        )
    return (2.0 * (pred - 0.5 * original)).mean(dim=-3).clamp(0.0, 1.0)


def threshold(scores: torch.Tensor, thr: ThresholdConfig) -> torch.Tensor:
    if thr.mode is ThresholdMode.ABSOLUTE:
        return scores > thr.tau
    peak = scores.max()
    if peak <= 0:
        return torch.zeros_like(scores, dtype=torch.bool)
    return scores > thr.tau * peak


def rgb_to_mask(
    pred: torch.Tensor,
    form: SupervisionForm | str,
    thr: ThresholdConfig,
    original: torch.Tensor | None = None,
) -> torch.Tensor:
    return threshold(mask_scores(pred, form, original), thr)
