"""Training loop, learning-rate schedule, gradient accumulation and gradient checking."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from ..checkpoint import Checkpoint, save_checkpoint
from ..config import CHECKPOINT_FILE, RUN_CONFIG_FILE
from ..data import DatasetIndex, Episode, build_folds, sample_episodes
from ..errors import TrainingDivergedError
from ..generation import (
    TrainSample,
    build_train_sample,
    encode_training_episode,
    loss,
    schedule_for,
)
from ..models import LrSchedule, Process, RunConfig
from ..unet import FewShotUNet

LOGGER = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
FD_STEP = 1e-5


def build_model(run: RunConfig) -> FewShotUNet:
    torch.manual_seed(run.seed)
    return FewShotUNet(run.unet)


def lr_at(run: RunConfig, iteration: int) -> float:
    """lr₀·(1 − i/iterations) under linear decay, lr₀ otherwise."""
    if run.lr_schedule is LrSchedule.CONSTANT or run.iterations == 0:
        return run.lr
    return run.lr * (1.0 - iteration / run.iterations)


def make_optimizer(model: torch.nn.Module, run: RunConfig) -> tuple[AdamW, LambdaLR]:
    optimizer = AdamW(
        model.parameters(),
        lr=run.lr,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=run.weight_decay,
    )
    scheduler = LambdaLR(optimizer, lambda i: lr_at(run, i) / run.lr)
    return optimizer, scheduler


def training_loss(model: FewShotUNet, sample: TrainSample) -> torch.Tensor:
    prediction = model(sample.query_input, sample.supports, sample.timestep)
    return loss(prediction, sample.target)


def accumulate_gradients(model: FewShotUNet, samples: Sequence[TrainSample]) -> float:
    """Backpropagates the mean loss over ``samples`` one sample at a time; returns that mean."""
    total = 0.0
    for sample in samples:
        value = training_loss(model, sample) / len(samples)
        if not torch.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value.item()} at timestep={sample.timestep}"
            )
        value.backward()
        total += value.item()
    return total


def _episode_stream(
    run: RunConfig, dataset: DatasetIndex | None, episodes: Sequence[Episode] | None
) -> Iterator[list[Episode]]:
    """Yields one accumulation window of episodes per iteration."""
    if episodes:
        position = 0
        while True:
            window = [episodes[(position + k) % len(episodes)] for k in range(run.grad_accum)]
            position += run.grad_accum
            yield window
    if dataset is None:
        raise ValueError("train needs a dataset or a fixed episode pool")
    train_classes, _ = build_folds(run.fold_spec)
    classes = [c for c in train_classes if c in set(dataset.classes)]
    rng = np.random.default_rng(run.seed)
    while True:
        n_shot = int(rng.integers(run.n_shot_min, run.n_shot_max + 1))
        seed = int(rng.integers(2**31 - 1))
        yield sample_episodes(dataset, classes, n_shot, run.grad_accum, seed)


def train(
    run: RunConfig,
    dataset: DatasetIndex | None = None,
    *,
    episodes: Sequence[Episode] | None = None,
    out_dir: str | Path | None = None,
    run_id: str = "local",
) -> Checkpoint:
    """Trains a fresh model and returns its checkpoint; writes it under ``out_dir`` when given."""
    model = build_model(run)
    model.train()
    optimizer, scheduler = make_optimizer(model, run)
    gen = run.generation
    sched = None if gen.process is Process.OI2M else schedule_for(gen)
    generator = torch.Generator().manual_seed(run.seed)
    stream = _episode_stream(run, dataset, episodes)

    LOGGER.info(
        "Training started run_id=%s iterations=%d grad_accum=%d process=%s interaction=%s injection=%s",
        run_id,
        run.iterations,
        run.grad_accum,
        gen.process.value,
        run.interaction.value,
        run.injection.value,
    )
    for iteration in range(run.iterations):
        window = next(stream)
        samples = [
            build_train_sample(encode_training_episode(ep, run), gen, sched, generator, run.query_fill)
            for ep in window
        ]
        optimizer.zero_grad(set_to_none=True)
        try:
            value = accumulate_gradients(model, samples)
        except TrainingDivergedError:
            LOGGER.error("Training diverged run_id=%s iteration=%d", run_id, iteration)
            raise
        optimizer.step()
        scheduler.step()
        if iteration % run.log_every == 0 or iteration == run.iterations - 1:
            LOGGER.info(
                "run_id=%s iteration=%d loss=%.6f lr=%.3e n_shot=%d",
                run_id,
                iteration,
                value,
                lr_at(run, iteration),
                window[0].n_shot,
            )

    checkpoint = Checkpoint.from_model(model, run, iteration=run.iterations)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint, out_dir / CHECKPOINT_FILE)
        (out_dir / RUN_CONFIG_FILE).write_text(run.model_dump_json(indent=2), encoding="utf-8")
    return checkpoint


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-2)


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((entry.rel_error for entry in self.entries), default=0.0)

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda entry: entry.rel_error, default=None)


GradientHook = Callable[[dict[str, torch.Tensor]], None]


def grad_check(
    model: FewShotUNet,
    sample: TrainSample,
    num_params: int = 32,
    seed: int = 0,
    *,
    names: Iterable[str] | None = None,
    gradient_hook: GradientHook | None = None,
    step: float = FD_STEP,
) -> GradCheckReport:
    """Compares analytic gradients of the training loss with central finite differences.

    Runs on a float64 copy of ``model``. ``gradient_hook`` may edit the analytic gradients in place
    before the comparison.
    """
    checked = copy.deepcopy(model).double()
    sample = sample.to(torch.float64)

    checked.zero_grad(set_to_none=True)
    training_loss(checked, sample).backward()
    params = dict(checked.named_parameters())
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    if gradient_hook is not None:
        gradient_hook(analytic)

    allowed = set(names) if names is not None else set(params)
    candidates = [name for name in params if name in allowed]
    sizes = np.array([params[name].numel() for name in candidates])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(num_params, total), replace=False)
    bounds = np.cumsum(sizes)

    report = GradCheckReport()
    with torch.no_grad():
        for flat in sorted(int(p) for p in picks):
            owner = int(np.searchsorted(bounds, flat, side="right"))
            name = candidates[owner]
            index = flat - (int(bounds[owner - 1]) if owner else 0)
            values = params[name].view(-1)
            original = values[index].item()
            values[index] = original + step
            plus = training_loss(checked, sample).item()
            values[index] = original - step
            minus = training_loss(checked, sample).item()
            values[index] = original
            numeric = (plus - minus) / (2 * step)
            report.entries.append(
                GradCheckEntry(name, index, float(analytic[name].view(-1)[index]), numeric)
            )

    worst = report.worst
    LOGGER.info(
        "Gradient check params=%d max_rel_error=%.3e worst=%s",
        len(report.entries),
        report.max_rel_error,
        None if worst is None else f"{worst.name}[{worst.index}]",
    )
    if not math.isfinite(report.max_rel_error):
        LOGGER.warning("Gradient check produced a non-finite error")
    return report
