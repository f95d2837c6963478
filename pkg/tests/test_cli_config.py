from __future__ import annotations

import json

import pandas as pd
import pytest
from pydantic import ValidationError

import cli
from src.config import (
    CHECKPOINT_FILE,
    GRAD_CHECK_FILE,
    MANIFEST_FILE,
    METRICS_FILE,
    RUN_CONFIG_FILE,
    parse_overrides,
    read_config_file,
)
from src.models import Interaction, Process, RunConfig

SMALL_CONFIG = """\
canvas=32x32
widths=32,32
heads=2
dim_head=16
num_classes=4
images_per_class=4
num_folds=2
iterations=1
grad_accum=1
eval_episodes=1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path


def test_config_file_and_overrides(config_file):
    values = read_config_file(config_file)
    assert values["canvas"] == "32x32"
    assert parse_overrides(["interaction = TCA", "seed=4"]) == {"interaction": "TCA", "seed": "4"}
    with pytest.raises(ValueError):
        parse_overrides(["no-separator"])
    with pytest.raises(FileNotFoundError):
        read_config_file(config_file.parent / "missing.env")


def test_sources_are_layered(config_file):
    run = RunConfig.from_sources(
        preset="full",
        file_values=read_config_file(config_file),
        overrides={"interaction": "TCA"},
    )
    assert run.canvas == (32, 32)
    assert run.widths == (32, 32)
    assert run.lr == pytest.approx(1e-5)
    assert run.interaction is Interaction.TCA
    with pytest.raises(ValueError):
        RunConfig.from_sources(preset="huge")


def test_run_config_validation():
    with pytest.raises(ValidationError):
        RunConfig(unknown_key=1)
    with pytest.raises(ValidationError):
        RunConfig(n_shot_min=3, n_shot_max=2)
    with pytest.raises(ValidationError):
        RunConfig(variance_pair="beta3")
    with pytest.raises(ValidationError):
        RunConfig(canvas=(30, 30))
    assert RunConfig(process=Process.OI2M, steps=20).generation.steps == 1
    strong = RunConfig(variance_pair="beta2").generation
    assert (strong.beta_start, strong.beta_end) == (0.0272, 0.384)
    custom = RunConfig(variance_pair="custom", beta_start=0.001, beta_end=0.02).generation
    assert custom.beta_end == 0.02
    assert RunConfig(fusion_layers="0,3").fusion_layers == (0, 3)
    assert RunConfig(fusion_layers="all").fusion_layers is None
    with pytest.raises(ValidationError, match="fusion_layers"):
        RunConfig(fusion_layers=(99,))
    with pytest.raises(ValidationError, match="fusion_layers"):
        RunConfig(widths=(64, 64), fusion_layers=(4,))


def test_with_updates_validates():
    run = RunConfig()
    assert run.with_updates(seed=9).seed == 9
    with pytest.raises(ValidationError):
        run.with_updates(ensemble=2)


def test_parse_grid():
    grid = cli.parse_grid(["interaction=FSA|TCA", "injection = concatenation | addition"])
    assert len(grid) == 4
    assert grid[-1] == {"interaction": "TCA", "injection": "addition"}
    assert cli.parse_grid([]) == [{}]
    with pytest.raises(ValueError):
        cli.parse_grid(["interaction"])


def test_bad_configuration_exits_with_status_one(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["gen-data", "--out", str(tmp_path), "--set", "widths=30"])
    assert excinfo.value.code == 1


def test_command_line_pipeline(config_file, tmp_path):
    data_dir, train_dir = tmp_path / "data", tmp_path / "train"
    common = ["--config", str(config_file)]

    cli.main(["gen-data", *common, "--out", str(data_dir)])
    assert (data_dir / MANIFEST_FILE).exists()
    assert json.loads((data_dir / RUN_CONFIG_FILE).read_text(encoding="utf-8"))["num_classes"] == 4

    cli.main(["train", *common, "--data", str(data_dir), "--out", str(train_dir)])
    assert (train_dir / CHECKPOINT_FILE).exists()
    assert pd.read_csv(train_dir / METRICS_FILE)["class_id"].iloc[-1] == "mean"

    eval_dir = tmp_path / "eval"
    checkpoint = str(train_dir / CHECKPOINT_FILE)
    cli.main(["eval", "--data", str(data_dir), "--checkpoint", checkpoint, "--n-shot", "2", "--out", str(eval_dir)])
    assert pd.read_csv(eval_dir / METRICS_FILE)["n_shot"].eq(2).all()

    predict_dir = tmp_path / "predict"
    images = sorted((data_dir / "images").glob("c00_*.ppm"))
    cli.main(
        [
            "predict",
            "--checkpoint", checkpoint,
            "--query", str(images[0]),
            "--support", str(images[1]),
            "--mask", str(data_dir / "masks" / f"{images[1].stem}_00.pgm"),
            "--out", str(predict_dir),
        ]
    )
    assert (predict_dir / "mask.pgm").exists()
    assert (predict_dir / "scores.ppm").exists()


def test_grad_check_command(config_file, tmp_path):
    cli.main(["grad-check", "--config", str(config_file), "--num-params", "4", "--out", str(tmp_path)])
    table = pd.read_csv(tmp_path / GRAD_CHECK_FILE)
    assert len(table) == 4
    assert list(table.columns) == ["name", "index", "analytic", "numeric", "rel_error"]
    assert (table["rel_error"] < 1e-4).all()


def test_ablate_command(config_file, tmp_path, synthetic_dir):
    cli.main(
        [
            "ablate",
            "--config", str(config_file),
            "--data", str(synthetic_dir),
            "--grid", "injection=concatenation|addition",
            "--out", str(tmp_path),
        ]
    )
    table = pd.read_csv(tmp_path / "ablation.csv")
    assert table["config"].tolist() == ["injection=concatenation", "injection=addition"]
