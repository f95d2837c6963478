from __future__ import annotations

import pytest
import torch

from src.codec import decode, encode, mask_scores, mask_to_rgb, resize_mask, rgb_to_mask, threshold
from src.errors import MissingOriginalError, ShapeMismatchError
from src.models import SupervisionForm, ThresholdConfig, ThresholdMode

from .conftest import random_image, random_mask

RELATIVE = ThresholdConfig()
GRID = torch.tensor([[0.8, 0.3], [0.1, 0.05]])


def test_encode_shape_and_round_trip():
    image = torch.rand(3, 16, 16)
    latent = encode(image, 4)
    assert latent.shape == (48, 4, 4)
    assert torch.equal(decode(latent, 4), image)
    assert torch.equal(encode(decode(latent, 4), 4), latent)


def test_zero_image_encodes_to_zero_latent():
    assert torch.count_nonzero(encode(torch.zeros(3, 8, 8))) == 0
    assert torch.count_nonzero(decode(torch.zeros(48, 2, 2))) == 0


def test_encode_rejects_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        encode(torch.rand(3, 10, 16), 4)
    with pytest.raises(ShapeMismatchError):
        encode(torch.rand(1, 16, 16), 4)
    with pytest.raises(ShapeMismatchError):
        decode(torch.rand(12, 4, 4), 4)


def test_decode_clamps():
    assert decode(torch.full((48, 2, 2), 3.0)).max().item() == 1.0
    assert decode(torch.full((48, 2, 2), -3.0)).min().item() == 0.0


def test_mask_to_rgb_forms():
    image = torch.full((3, 4, 4), 0.4)
    ones = torch.ones(4, 4, dtype=torch.bool)
    zeros = torch.zeros(4, 4, dtype=torch.bool)
    assert torch.equal(mask_to_rgb(ones, image, SupervisionForm.WHITE_ON_BLACK), torch.ones(3, 4, 4))
    assert torch.allclose(mask_to_rgb(ones, image, SupervisionForm.MASK_OVER_IMAGE), torch.full((3, 4, 4), 0.7))
    assert torch.count_nonzero(mask_to_rgb(zeros, image, SupervisionForm.REAL_FG_BLACK_BG)) == 0
    assert torch.equal(mask_to_rgb(zeros, image, SupervisionForm.BLACK_FG_REAL_BG), image)
    with pytest.raises(ShapeMismatchError):
        mask_to_rgb(torch.ones(3, 4, dtype=torch.bool), image, "white_on_black")


@pytest.mark.parametrize("form", list(SupervisionForm))
@pytest.mark.parametrize("tau", [0.05, 0.25, 0.5, 0.95])
def test_supervision_closed_loop(form, tau):
    for pair in range(100):
        image = random_image(2 * pair, (16, 16))
        mask = random_mask(2 * pair + 1, (16, 16))
        rendered = mask_to_rgb(mask, image, form)
        assert rendered.min() >= 0.0 and rendered.max() <= 1.0
        for mode in ThresholdMode:
            recovered = rgb_to_mask(rendered, form, ThresholdConfig(mode=mode, tau=tau), image)
            assert torch.equal(recovered, mask), f"pair={pair} mode={mode.value}"


def test_mask_over_image_needs_original():
    with pytest.raises(MissingOriginalError):
        mask_scores(torch.rand(3, 4, 4), SupervisionForm.MASK_OVER_IMAGE)


def test_rgb_to_mask_from_channel_mean():
    pred = GRID.expand(3, -1, -1)
    assert torch.equal(rgb_to_mask(pred, "white_on_black", RELATIVE), torch.tensor([[True, True], [False, False]]))


def test_threshold_modes():
    expected = torch.tensor([[True, True], [False, False]])
    assert torch.equal(threshold(GRID, RELATIVE), expected)
    assert torch.equal(threshold(GRID, ThresholdConfig(mode=ThresholdMode.ABSOLUTE, tau=0.15)), expected)
    assert not threshold(torch.zeros(3, 3), RELATIVE).any()


def brute_force_threshold(scores: torch.Tensor, mode: ThresholdMode, tau: float) -> torch.Tensor:
    rows = scores.tolist()
    if mode is ThresholdMode.ABSOLUTE:
        cutoff = tau
    else:
        peak = max(max(row) for row in rows)
        if peak <= 0.0:
            return torch.zeros_like(scores, dtype=torch.bool)
        cutoff = tau * peak
    return torch.tensor([[value > cutoff for value in row] for row in rows])


# Dyadic taus keep tau * peak exact in float32.
@pytest.mark.parametrize("mode", list(ThresholdMode))
@pytest.mark.parametrize("tau", [0.125, 0.25, 0.5])
def test_threshold_matches_brute_force(mode, tau):
    generator = torch.Generator().manual_seed(11)
    for number in range(1000):
        height, width = (int(d) for d in torch.randint(1, 7, (2,), generator=generator))
        scores = torch.rand(height, width, generator=generator)
        if number % 50 == 0:
            scores.zero_()
        elif number % 7 == 0:
            scores[scores < 0.5] = 0.0
        expected = brute_force_threshold(scores, mode, tau)
        assert torch.equal(threshold(scores, ThresholdConfig(mode=mode, tau=tau)), expected), number


def test_default_relative_tau():
    assert RELATIVE.mode is ThresholdMode.RELATIVE
    assert RELATIVE.tau == 0.25


def test_relative_threshold_is_scale_invariant():
    scores = torch.rand(8, 8)
    for scale in (0.5, 0.25, 0.125):
        assert torch.equal(threshold(scores * scale, RELATIVE), threshold(scores, RELATIVE))


def test_resize_mask_nearest():
    mask = torch.zeros(8, 8, dtype=torch.bool)
    mask[:4, :4] = True
    small = resize_mask(mask, (2, 2))
    assert torch.equal(small, torch.tensor([[True, False], [False, False]]))
    assert torch.equal(resize_mask(mask, (8, 8)), mask)
