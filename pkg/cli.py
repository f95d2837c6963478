"""Command-line entry point: dataset generation, training, evaluation, ablations and prediction."""
from __future__ import annotations

import argparse
import logging
import tempfile
from pathlib import Path
from typing import Any, Sequence
from uuid import uuid4

import pandas as pd
import torch
from pydantic import ValidationError

from src.checkpoint import load_checkpoint
from src.config import (
    DEFAULT_CHECKPOINT,
    DEFAULT_OUT_DIR,
    GRAD_CHECK_FILE,
    NUM_THREADS,
    PRESETS,
    RUN_CONFIG_FILE,
    parse_overrides,
    read_config_file,
)
from src.data import DatasetIndex, build_folds, gen_synthetic, load_index, sample_episodes
from src.errors import FewSegError
from src.generation import build_train_sample, encode_training_episode, schedule_for
from src.metrics import write_table
from src.models import Process, RunConfig
from src.services.evaluation import ablate, evaluate, grid_product
from src.services.prediction import predict
from src.services.training import GradCheckReport, build_model, grad_check, train

LOGGER = logging.getLogger(__name__)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Flat 'key = value' run configuration file.")
    common.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default="toy",
        help="Named base configuration applied before the config file. Default: toy.",
    )
    common.add_argument("--seed", type=int, help="Overrides the run seed.")
    common.add_argument(
        "--out",
        type=Path,
        default=DEFAULT_OUT_DIR,
        help=f"Output directory for artifacts. Default: {DEFAULT_OUT_DIR}.",
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Overrides one configuration key; may be repeated.",
    )

    parser = argparse.ArgumentParser(description="Few-shot segmentation with a toy latent-diffusion UNet.")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="Render the synthetic shapes dataset.")

    train_parser = commands.add_parser("train", parents=[common], help="Train, then evaluate the fold.")
    train_parser.add_argument("--data", type=Path, required=True, help="Dataset manifest or directory.")

    eval_parser = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint.")
    eval_parser.add_argument("--data", type=Path, required=True, help="Dataset manifest or directory.")
    eval_parser.add_argument("--checkpoint", type=Path, default=DEFAULT_CHECKPOINT)
    eval_parser.add_argument("--n-shot", type=int, help="Support count. Default: n_shot_infer.")

    ablate_parser = commands.add_parser("ablate", parents=[common], help="Train and evaluate a grid.")
    ablate_parser.add_argument("--data", type=Path, required=True, help="Dataset manifest or directory.")
    ablate_parser.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="KEY=V1|V2",
        help="One grid axis; values separated by '|'. Repeat for a cartesian product.",
    )

    predict_parser = commands.add_parser("predict", parents=[common], help="Segment one query image.")
    predict_parser.add_argument("--checkpoint", type=Path, default=DEFAULT_CHECKPOINT)
    predict_parser.add_argument("--query", type=Path, required=True, help="Query image (PPM).")
    predict_parser.add_argument("--support", type=Path, action="append", required=True)
    predict_parser.add_argument("--mask", type=Path, action="append", required=True)

    check_parser = commands.add_parser("grad-check", parents=[common], help="Finite-difference gradient check.")
    check_parser.add_argument("--data", type=Path, help="Dataset manifest. Default: a temporary synthetic set.")
    check_parser.add_argument("--num-params", type=int, default=32)

    return parser.parse_args(argv)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.from_sources(preset=args.preset, file_values=file_values, overrides=overrides)


def parse_grid(axes: Sequence[str]) -> list[dict[str, Any]]:
    parsed = {}
    for axis in axes:
        key, sep, values = axis.partition("=")
        if not sep or not key.strip() or not values.strip():
            raise ValueError(f"Grid axis '{axis}' must have the form key=v1|v2")
        parsed[key.strip()] = [value.strip() for value in values.split("|")]
    return grid_product(parsed) if parsed else [{}]


def write_run_config(run: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / RUN_CONFIG_FILE).write_text(run.model_dump_json(indent=2), encoding="utf-8")


def run_gen_data(args: argparse.Namespace, run: RunConfig, run_id: str) -> None:
    gen_synthetic(run.num_classes, run.images_per_class, run.canvas, run.seed, args.out)
    write_run_config(run, args.out)
    LOGGER.info("run_id=%s dataset written to %s", run_id, args.out)


def run_train(args: argparse.Namespace, run: RunConfig, run_id: str) -> None:
    dataset = load_index(args.data)
    checkpoint = train(run, dataset, out_dir=args.out, run_id=run_id)
    evaluate(checkpoint, dataset, run.fold_spec, run.n_shot_infer, run, out_dir=args.out, run_id=run_id)


def run_eval(args: argparse.Namespace, run_id: str) -> None:
    if args.checkpoint is None:
        raise ValueError("--checkpoint is required (or set FEWSEG_CHECKPOINT)")
    checkpoint = load_checkpoint(args.checkpoint)
    file_values = read_config_file(args.config) if args.config else {}
    updates: dict[str, Any] = {**file_values, **parse_overrides(args.overrides)}
    if args.seed is not None:
        updates["seed"] = args.seed
    run = checkpoint.config.with_updates(**updates)
    dataset = load_index(args.data)
    n_shot = args.n_shot or run.n_shot_infer
    write_run_config(run, args.out)
    evaluate(checkpoint, dataset, run.fold_spec, n_shot, run, out_dir=args.out, run_id=run_id)


def run_ablate(args: argparse.Namespace, run: RunConfig, run_id: str) -> None:
    dataset = load_index(args.data)
    grid = parse_grid(args.grid)
    write_run_config(run, args.out)
    table = ablate(grid, run, dataset, out_dir=args.out)
    LOGGER.info("run_id=%s ablation finished cells=%d best=%s", run_id, len(table), table.loc[table["miou"].idxmax(), "config"])


def run_predict(args: argparse.Namespace, run: RunConfig, run_id: str) -> None:
    if args.checkpoint is None:
        raise ValueError("--checkpoint is required (or set FEWSEG_CHECKPOINT)")
    predict(args.query, args.support, args.mask, args.checkpoint, args.out, seed=run.seed, session_id=run_id)


def run_grad_check(args: argparse.Namespace, run: RunConfig, run_id: str) -> None:
    run = run.with_updates(process=Process.OI2M)
    with tempfile.TemporaryDirectory() as scratch:
        if args.data:
            dataset = load_index(args.data)
        else:
            dataset = gen_synthetic(run.num_classes, run.images_per_class, run.canvas, run.seed, scratch)
        report = _grad_check_report(run, dataset, args.num_params)
    write_run_config(run, args.out)
    frame = pd.DataFrame(
        [
            {
                "name": entry.name,
                "index": entry.index,
                "analytic": entry.analytic,
                "numeric": entry.numeric,
                "rel_error": entry.rel_error,
            }
            for entry in report.entries
        ]
    )
    write_table(frame, args.out / GRAD_CHECK_FILE)
    LOGGER.info("run_id=%s max_rel_error=%.3e", run_id, report.max_rel_error)


def _grad_check_report(run: RunConfig, dataset: DatasetIndex, num_params: int) -> GradCheckReport:
    train_classes, _ = build_folds(run.fold_spec)
    classes = [c for c in train_classes if c in set(dataset.classes)]
    episode = sample_episodes(dataset, classes, run.n_shot_min, 1, run.seed)[0]
    sample = build_train_sample(
        encode_training_episode(episode, run),
        run.generation,
        None if run.process is Process.OI2M else schedule_for(run.generation),
        torch.Generator().manual_seed(run.seed),
        run.query_fill,
    )
    return grad_check(build_model(run), sample, num_params, run.seed)


def main(argv: Sequence[str] | None = None) -> None:
    args = parse_args(argv)
    torch.set_num_threads(NUM_THREADS)
    run_id = uuid4().hex[:12]
    LOGGER.info("Starting command=%s run_id=%s out=%s", args.command, run_id, args.out)
    try:
        if args.command == "eval":
            run_eval(args, run_id)
            return
        run = resolve_config(args)
        handlers = {
            "gen-data": run_gen_data,
            "train": run_train,
            "ablate": run_ablate,
            "predict": run_predict,
            "grad-check": run_grad_check,
        }
        handlers[args.command](args, run, run_id)
    except (FewSegError, ValidationError, ValueError, FileNotFoundError) as exc:
        LOGGER.error("Command %s failed run_id=%s: %s", args.command, run_id, exc)
        raise SystemExit(1) from exc


if __name__ == "__main__":
    main()
