"""Few-shot evaluation on held-out classes and ablation grids."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Mapping, Sequence

import pandas as pd
import torch

from ..checkpoint import Checkpoint
from ..config import ABLATION_FILE, METRICS_FILE
from ..data import DatasetIndex, Episode, build_folds, sample_episodes
from ..errors import FoldMismatchError
from ..generation import encode_training_episode, infer
from ..metrics import MetricAccumulator, write_table
from ..models import FoldSpec, RunConfig
from .training import train

LOGGER = logging.getLogger(__name__)

# Added to the run seed for evaluation episode sampling.
EVAL_SEED_OFFSET = 1_000_003


@dataclass
class EvaluationResult:
    table: pd.DataFrame
    miou: float
    episode_miou: float
    accumulator: MetricAccumulator


def evaluation_episodes(
    dataset: DatasetIndex, fold: FoldSpec, n_shot: int, count: int, seed: int
) -> list[Episode]:
    _, test_classes = build_folds(fold)
    available = set(dataset.classes)
    classes = [c for c in test_classes if c in available]
    if not classes:
        raise FoldMismatchError(
            f"none of the fold {fold.fold_index} test classes {test_classes} occur in the dataset"
        )
    return sample_episodes(dataset, classes, n_shot, count, seed + EVAL_SEED_OFFSET)


def evaluate(
    checkpoint: Checkpoint,
    dataset: DatasetIndex | None,
    fold: FoldSpec,
    n_shot: int,
    run: RunConfig | None = None,
    *,
    episodes: Sequence[Episode] | None = None,
    out_dir: str | Path | None = None,
    run_id: str = "local",
) -> EvaluationResult:
    """Runs inference over test-class episodes and accumulates per-class IoU.

    ``run`` supplies the inference-time options and defaults to the checkpoint's snapshot.
    The checkpoint's tensors are never written to.
    """
    run = run or checkpoint.config
    if episodes is None:
        if dataset is None:
            raise ValueError("evaluate needs a dataset or an explicit episode list")
        episodes = evaluation_episodes(dataset, fold, n_shot, run.eval_episodes, run.seed)

    model = checkpoint.build_model()
    gen = run.generation
    accumulator = MetricAccumulator()
    with torch.no_grad():
        for number, episode in enumerate(episodes):
            predictor = model
            if run.infer_kv_sampling:
                predictor = partial(model, kv_sample_seed=run.seed + number)
            encoded = encode_training_episode(episode, run)
            mask = infer(predictor, encoded, gen, run, seed=run.seed + number)
            value = accumulator.add(episode.class_id, mask, episode.query_mask)
            LOGGER.debug(
                "run_id=%s episode=%d class_id=%d n_shot=%d iou=%.4f",
                run_id,
                number,
                episode.class_id,
                episode.n_shot,
                value,
            )

    table = accumulator.to_frame(fold.fold_index, n_shot)
    result = EvaluationResult(
        table=table,
        miou=accumulator.miou(),
        episode_miou=accumulator.episode_miou(),
        accumulator=accumulator,
    )
    LOGGER.info(
        "Evaluation finished run_id=%s fold=%d n_shot=%d episodes=%d miou=%.4f episode_miou=%.4f",
        run_id,
        fold.fold_index,
        n_shot,
        len(episodes),
        result.miou,
        result.episode_miou,
    )
    if out_dir is not None:
        write_table(table, Path(out_dir) / METRICS_FILE)
    return result


def grid_product(axes: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of ``{key: [values]}`` as a list of config deltas."""
    keys = list(axes)
    return [dict(zip(keys, values)) for values in itertools.product(*(axes[k] for k in keys))]


def describe_delta(delta: Mapping[str, Any]) -> str:
    if not delta:
        return "base"
    return ";".join(f"{key}={getattr(value, 'value', value)}" for key, value in delta.items())


def ablate(
    grid: Sequence[Mapping[str, Any]],
    base: RunConfig,
    dataset: DatasetIndex,
    *,
    out_dir: str | Path | None = None,
) -> pd.DataFrame:
    """Trains and evaluates every grid cell with the base seeds; one ``(config, miou)`` row each."""
    rows = []
    for number, delta in enumerate(grid):
        run = base.with_updates(**delta)
        label = describe_delta(delta)
        run_id = f"ablate-{number}"
        LOGGER.info("Ablation cell run_id=%s config=%s", run_id, label)
        checkpoint = train(run, dataset, run_id=run_id)
        result = evaluate(checkpoint, dataset, run.fold_spec, run.n_shot_infer, run, run_id=run_id)
        rows.append({"config": label, "miou": result.miou})

    table = pd.DataFrame(rows, columns=["config", "miou"])
    if out_dir is not None:
        write_table(table, Path(out_dir) / ABLATION_FILE)
    return table
