"""Application configuration and shared constants."""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Final

from dotenv import dotenv_values, load_dotenv

# Ensure environment variables are loaded before any configuration values are read.
load_dotenv()

# Configure application-wide logging once on import.
LOG_FILE_NAME: Final[str | None] = os.getenv("FEWSEG_LOG_FILE") or None
LOG_LEVEL: Final[str] = os.getenv("FEWSEG_LOG_LEVEL", "INFO").upper()
logging.basicConfig(
    level=LOG_LEVEL,
    format="%(asctime)s - %(levelname)s - %(message)s",
    filename=LOG_FILE_NAME,
    filemode="a",
)

# Resolve important paths relative to the project root.
PROJECT_ROOT: Final[Path] = Path(__file__).resolve().parents[1]
DEFAULT_OUT_DIR: Final[Path] = Path(os.getenv("FEWSEG_OUT_DIR", str(PROJECT_ROOT / "runs")))
DEFAULT_CHECKPOINT: Final[str | None] = os.getenv("FEWSEG_CHECKPOINT") or None
NUM_THREADS: Final[int] = int(os.getenv("FEWSEG_NUM_THREADS", "1"))

# Artifact names written under --out.
RUN_CONFIG_FILE: Final[str] = "run.json"
METRICS_FILE: Final[str] = "metrics.csv"
ABLATION_FILE: Final[str] = "ablation.csv"
CHECKPOINT_FILE: Final[str] = "model.ckpt"
MANIFEST_FILE: Final[str] = "manifest.jsonl"
GRAD_CHECK_FILE: Final[str] = "grad_check.csv"

# Noise-schedule variance pairs (beta_start, beta_end).
VARIANCE_PAIRS: Final[dict[str, tuple[float, float]]] = {
    "beta1": (0.00085, 0.012),
    "beta2": (0.0272, 0.384),
}

# Post-processing default: relative threshold at 0.25 of the score maximum.
DEFAULT_THRESHOLD_TAU: Final[float] = 0.25

# Named presets. "toy" is the desk-scale default, "full" records the 512x512 regime.
PRESETS: Final[dict[str, dict[str, object]]] = {
    "toy": {},
    "full": {
        "lr": 1e-5,
        "grad_accum": 16,
        "iterations": 10_000,
        "canvas": (512, 512),
        "eval_episodes": 1000,
    },
}


def read_config_file(path: str | os.PathLike[str]) -> dict[str, str]:
    """Parses a flat ``key = value`` file into a dict of raw strings."""
    config_path = Path(path)
    if not config_path.exists():
        raise FileNotFoundError(f"Config file '{config_path}' does not exist.")
    values = dotenv_values(config_path)
    return {key: value for key, value in values.items() if value is not None}


def parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"Override '{pair}' must have the form key=value")
        overrides[key.strip()] = value.strip()
    return overrides
