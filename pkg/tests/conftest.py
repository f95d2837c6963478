from __future__ import annotations

import pytest
import torch

from src.data import gen_synthetic
from src.models import RunConfig

SMALL_CANVAS = (32, 32)


def small_run(**changes) -> RunConfig:
    """A 32x32, two-level, width-32 configuration that trains in seconds."""
    base = dict(
        canvas=SMALL_CANVAS,
        widths=(32, 32),
        heads=2,
        dim_head=16,
        patch_size=8,
        num_classes=4,
        images_per_class=4,
        num_folds=2,
        iterations=2,
        grad_accum=1,
        eval_episodes=2,
        log_every=1,
        steps=2,
    )
    base.update(changes)
    return RunConfig(**base)


def random_image(seed: int, size: tuple[int, int] = SMALL_CANVAS, low: float = 0.1) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return low + (1.0 - low) * torch.rand((3, *size), generator=generator)


def random_mask(seed: int, size: tuple[int, int] = SMALL_CANVAS) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    mask = torch.rand(size, generator=generator) > 0.5
    mask[0, 0] = True
    return mask


@pytest.fixture
def run_config() -> RunConfig:
    return small_run()


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("shapes")
    gen_synthetic(4, 4, SMALL_CANVAS, seed=0, out_dir=out_dir)
    return out_dir


@pytest.fixture
def dataset(synthetic_dir):
    from src.data import load_index

    return load_index(synthetic_dir)
