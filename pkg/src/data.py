"""Folds, the synthetic shapes dataset, manifest ingestion, episode sampling and image I/O."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .config import MANIFEST_FILE
from .errors import InsufficientDataError, InvalidDatasetError, ShapeMismatchError
from .models import FoldRule, FoldSpec

LOGGER = logging.getLogger(__name__)

SHAPES: tuple[str, ...] = ("circle", "square", "triangle", "bar")
PALETTE: tuple[tuple[float, float, float], ...] = (
    (0.90, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.25, 0.35, 0.95),
    (0.95, 0.85, 0.20),
    (0.85, 0.30, 0.85),
    (0.20, 0.85, 0.90),
    (0.95, 0.55, 0.15),
    (0.95, 0.95, 0.95),
)
MAX_CLASSES = len(SHAPES) * len(PALETTE)


def build_folds(spec: FoldSpec) -> tuple[list[int], list[int]]:
    """Returns ``(train_classes, test_classes)``, a partition of ``range(num_classes)``."""
    if spec.rule is FoldRule.INTERLEAVED:
        test = [c for c in range(spec.num_classes) if c % spec.num_folds == spec.fold_index]
    else:
        size = spec.num_classes // spec.num_folds
        test = list(range(spec.fold_index * size, (spec.fold_index + 1) * size))
    held_out = set(test)
    train = [c for c in range(spec.num_classes) if c not in held_out]
    return train, test


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def _read_array(path: str | Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise InvalidDatasetError(f"cannot decode image '{path}': {exc}") from exc


def read_image(path: str | Path) -> torch.Tensor:
    """Reads an RGB image as a float ``(3, H, W)`` tensor in [0, 1]."""
    array = _read_array(path, "RGB")
    return torch.from_numpy(array.copy()).permute(2, 0, 1).float() / 255.0


def write_image(image: torch.Tensor, path: str | Path) -> None:
    """Writes a ``(3, H, W)`` tensor in [0, 1] as binary PPM (P6)."""
    array = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    Image.fromarray(array.permute(1, 2, 0).cpu().numpy()).save(path, format="PPM")


def read_mask(path: str | Path) -> torch.Tensor:
    array = _read_array(path, "L")
    if not np.isin(array, (0, 255)).all():
        raise InvalidDatasetError(f"mask '{path}' is not binary (values must be 0 or 255)")
    return torch.from_numpy(array == 255)


def write_mask(mask: torch.Tensor, path: str | Path) -> None:
    """Writes an ``(H, W)`` mask as binary PGM (P5) with values 0 or 255."""
    array = mask.detach().bool().cpu().numpy().astype(np.uint8) * 255
    Image.fromarray(array).save(path, format="PPM")


# ---------------------------------------------------------------------------
# Dataset index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    image: Path
    masks: dict[int, Path]


@dataclass
class DatasetIndex:
    """Image records with per-class mask references. Loaded tensors are cached per path."""

    records: list[Record]
    _cache: dict[Path, torch.Tensor] = field(default_factory=dict, repr=False, compare=False)

    @property
    def classes(self) -> list[int]:
        return sorted({class_id for record in self.records for class_id in record.masks})

    def images_for_class(self, class_id: int) -> list[int]:
        return [i for i, record in enumerate(self.records) if class_id in record.masks]

    def image(self, record_index: int) -> torch.Tensor:
        path = self.records[record_index].image
        if path not in self._cache:
            self._cache[path] = read_image(path)
        return self._cache[path]

    def mask(self, record_index: int, class_id: int) -> torch.Tensor:
        record = self.records[record_index]
        if class_id not in record.masks:
            height, width = self.image(record_index).shape[-2:]
            return torch.zeros((height, width), dtype=torch.bool)
        path = record.masks[class_id]
        if path not in self._cache:
            self._cache[path] = read_mask(path)
        return self._cache[path]


def write_index(index: DatasetIndex, manifest: str | Path) -> Path:
    """Writes the JSON-lines manifest; paths are stored relative to the manifest's directory."""
    manifest = Path(manifest)
    root = manifest.parent.resolve()
    lines = []
    for record in index.records:
        entry = {
            "image": _relative(record.image, root),
            "masks": {str(c): _relative(p, root) for c, p in sorted(record.masks.items())},
        }
        lines.append(json.dumps(entry, sort_keys=True))
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_index(manifest: str | Path) -> DatasetIndex:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_FILE
    if not manifest.exists():
        raise InvalidDatasetError(f"manifest '{manifest}' does not exist")
    root = manifest.parent
    records: list[Record] = []
    for line_number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            image = root / entry["image"]
            masks = {int(c): root / p for c, p in entry.get("masks", {}).items()}
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InvalidDatasetError(f"{manifest}:{line_number}: malformed record") from exc
        for path in (image, *masks.values()):
            if not path.exists():
                raise InvalidDatasetError(f"{manifest}:{line_number}: '{path}' does not exist")
        records.append(Record(image=image, masks=masks))

    index = DatasetIndex(records)
    for i, record in enumerate(records):
        for class_id in record.masks:
            index.mask(i, class_id)
    LOGGER.info("Loaded dataset manifest=%s images=%d classes=%d", manifest, len(records), len(index.classes))
    return index


def _relative(path: Path, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root))
    except ValueError:
        return str(Path(path).resolve())


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    supports: list[tuple[torch.Tensor, torch.Tensor]]
    query_image: torch.Tensor
    query_mask: torch.Tensor
    class_id: int
    query_record: int
    support_records: tuple[int, ...]

    @property
    def n_shot(self) -> int:
        return len(self.supports)


def sample_episodes(
    index: DatasetIndex,
    classes: Sequence[int],
    n_shot: int,
    count: int,
    seed: int,
    allow_empty_query: bool = False,
) -> list[Episode]:
    """Seeded episodes: a class, then ``n_shot + 1`` distinct images containing it, query first.

    With ``allow_empty_query`` the query may be any image of the index, in which case its mask
    can be empty.
    """
    if n_shot < 1:
        raise InsufficientDataError(f"n_shot must be >= 1, got {n_shot}")
    if not classes:
        raise InsufficientDataError("no classes to sample episodes from")
    pools = {c: index.images_for_class(c) for c in classes}
    for class_id, pool in pools.items():
        needed = n_shot + 1
        if len(pool) < needed:
            raise InsufficientDataError(
                f"class {class_id} has {len(pool)} images, needs at least {needed} for {n_shot}-shot episodes"
            )

    rng = np.random.default_rng(seed)
    episodes = []
    for _ in range(count):
        class_id = int(classes[rng.integers(len(classes))])
        pool = pools[class_id]
        if allow_empty_query:
            query = int(rng.integers(len(index.records)))
            candidates = [i for i in pool if i != query]
            chosen = rng.choice(len(candidates), size=n_shot, replace=False)
            support_ids = tuple(candidates[int(i)] for i in chosen)
        else:
            chosen = rng.choice(len(pool), size=n_shot + 1, replace=False)
            query, *rest = (pool[int(i)] for i in chosen)
            support_ids = tuple(rest)
        episodes.append(
            Episode(
                supports=[(index.image(i), index.mask(i, class_id)) for i in support_ids],
                query_image=index.image(query),
                query_mask=index.mask(query, class_id),
                class_id=class_id,
                query_record=query,
                support_records=support_ids,
            )
        )
    return episodes


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------


def class_appearance(class_id: int) -> tuple[str, tuple[float, float, float]]:
    """Class id -> (shape, colour): colours cycle fastest."""
    return SHAPES[class_id // len(PALETTE)], PALETTE[class_id % len(PALETTE)]


def render_shape(
    shape: str, center: tuple[float, float], radius: float, canvas: tuple[int, int]
) -> np.ndarray:
    """Boolean ``(H, W)`` raster of one shape; ``center`` is ``(row, col)`` in pixel units."""
    height, width = canvas
    rows, cols = np.mgrid[0:height, 0:width]
    dy, dx = rows - center[0], cols - center[1]
    if shape == "circle":
        return dx**2 + dy**2 <= radius**2
    if shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "triangle":
        # apex on top, base of width 2r at the bottom
        depth = dy + radius
        return (depth >= 0) & (dy <= radius) & (np.abs(dx) <= depth / 2)
    if shape == "bar":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= max(1.0, radius / 3))
    raise ValueError(f"Unknown shape '{shape}'. Available shapes: {SHAPES}")


def _random_instance(
    rng: np.random.Generator, class_id: int, canvas: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    shape, color = class_appearance(class_id)
    height, width = canvas
    r_min = max(3.0, min(height, width) / 16)
    r_max = max(r_min + 1.0, min(height, width) / 6)
    radius = float(rng.uniform(r_min, r_max))
    center = (float(rng.uniform(radius, height - radius)), float(rng.uniform(radius, width - radius)))
    jitter = rng.uniform(-0.04, 0.04, size=3)
    return render_shape(shape, center, radius, canvas), np.clip(np.asarray(color) + jitter, 0.0, 1.0)


def gen_synthetic(
    num_classes: int,
    images_per_class: int,
    canvas: tuple[int, int],
    seed: int,
    out_dir: str | Path,
) -> DatasetIndex:
    """Renders a shapes dataset under ``out_dir`` and writes its manifest.

    Every image holds 1-3 instances of its class drawn over 0-2 distractors of other classes;
    class masks are the visible union of that class's instances.
    """
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must lie in [1, {MAX_CLASSES}], got {num_classes}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    height, width = canvas
    records = []
    for class_id in range(num_classes):
        for i in range(images_per_class):
            background = rng.uniform(0.1, 0.3)
            pixels = np.full((height, width, 3), background) + rng.normal(0.0, 0.02, size=(height, width, 3))
            owner = np.full((height, width), -1, dtype=np.int64)

            others = [c for c in range(num_classes) if c != class_id]
            num_distractors = int(rng.integers(0, 3)) if others else 0
            layers = [int(rng.choice(others)) for _ in range(num_distractors)]
            layers += [class_id] * int(rng.integers(1, 4))
            for layer_class in layers:
                region, color = _random_instance(rng, layer_class, canvas)
                pixels[region] = color
                owner[region] = layer_class

            stem = f"c{class_id:02d}_{i:03d}"
            image_path = image_dir / f"{stem}.ppm"
            write_image(torch.from_numpy(np.clip(pixels, 0.0, 1.0)).permute(2, 0, 1), image_path)
            masks = {}
            for visible in sorted(set(owner[owner >= 0].tolist())):
                mask_path = mask_dir / f"{stem}_{visible:02d}.pgm"
                write_mask(torch.from_numpy(owner == visible), mask_path)
                masks[int(visible)] = mask_path
            records.append(Record(image=image_path, masks=masks))

    index = DatasetIndex(records)
    write_index(index, out_dir / MANIFEST_FILE)
    LOGGER.info(
        "Generated synthetic dataset out_dir=%s classes=%d images=%d seed=%d",
        out_dir,
        num_classes,
        len(records),
        seed,
    )
    return index


def check_canvas(images: Iterable[torch.Tensor], canvas: tuple[int, int]) -> None:
    for image in images:
        if tuple(image.shape[-2:]) != tuple(canvas):
            raise ShapeMismatchError(
                f"image size {tuple(image.shape[-2:])} does not match canvas {tuple(canvas)}"
            )
