"""Single-query prediction from image files, shared by the CLI and the HTTP app."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Sequence

import torch

from ..checkpoint import load_checkpoint
from ..codec import threshold
from ..data import check_canvas, read_image, read_mask, write_image, write_mask
from ..errors import ShapeMismatchError
from ..generation import encode_episode, infer_scores

LOGGER = logging.getLogger(__name__)

MASK_FILE = "mask.pgm"
SCORE_FILE = "scores.ppm"


@dataclass(frozen=True)
class PredictionResult:
    mask_path: Path
    score_path: Path
    foreground_fraction: float


def predict(
    query_image: str | Path,
    support_images: Sequence[str | Path],
    support_masks: Sequence[str | Path],
    checkpoint_path: str | Path,
    out_dir: str | Path,
    seed: int = 0,
    session_id: str = "local",
) -> PredictionResult:
    """Predicts the query mask; writes the binary mask PGM and the raw score map PPM."""
    if len(support_images) != len(support_masks):
        raise ShapeMismatchError(
            f"got {len(support_images)} support images and {len(support_masks)} support masks"
        )
    checkpoint = load_checkpoint(checkpoint_path)
    run = checkpoint.config
    model = checkpoint.build_model()

    query = read_image(query_image)
    supports = [(read_image(i), read_mask(m)) for i, m in zip(support_images, support_masks)]
    check_canvas([query, *(image for image, _ in supports)], run.canvas)

    predictor = partial(model, kv_sample_seed=seed) if run.infer_kv_sampling else model
    with torch.no_grad():
        encoded = encode_episode(query, None, supports, run)
        scores = infer_scores(predictor, encoded, run.generation, run, seed)
    mask = threshold(scores, run.threshold)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_path = out_dir / MASK_FILE
    score_path = out_dir / SCORE_FILE
    write_mask(mask, mask_path)
    write_image(scores.expand(3, -1, -1), score_path)

    result = PredictionResult(mask_path, score_path, float(mask.float().mean()))
    LOGGER.info(
        "Prediction written session_id=%s n_shot=%d mask=%s foreground_fraction=%.4f",
        session_id,
        len(supports),
        mask_path,
        result.foreground_fraction,
    )
    return result
