"""Segmentation metrics: IoU, class-accumulated mIoU and the metrics table."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import pandas as pd
import torch

from .errors import ShapeMismatchError

METRIC_COLUMNS = ["fold", "class_id", "n_shot", "iou_accumulated", "episodes"]


def _counts(pred: torch.Tensor, gt: torch.Tensor) -> tuple[int, int]:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred shape {tuple(pred.shape)} != gt shape {tuple(gt.shape)}")
    pred, gt = pred.bool(), gt.bool()
    return int((pred & gt).sum()), int((pred | gt).sum())


def iou(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """|pred ∧ gt| / |pred ∨ gt|, 1.0 when both masks are empty."""
    intersection, union = _counts(pred, gt)
    return 1.0 if union == 0 else intersection / union


def miou(results: Sequence[tuple[int, int, int]]) -> float:
    """Mean over classes of accumulated intersection / accumulated union."""
    if not results:
        raise ValueError("miou needs at least one (class_id, intersection, union) result")
    totals: dict[int, list[int]] = {}
    for class_id, intersection, union in results:
        acc = totals.setdefault(class_id, [0, 0])
        acc[0] += intersection
        acc[1] += union
    per_class = [1.0 if union == 0 else inter / union for inter, union in totals.values()]
    return sum(per_class) / len(per_class)


def episode_iou_mean(ious: Iterable[float]) -> float:
    values = list(ious)
    if not values:
        raise ValueError("episode_iou_mean needs at least one episode")
    return sum(values) / len(values)


@dataclass
class MetricAccumulator:
    """Per-class intersection/union sums; ``merge`` is associative."""

    intersections: dict[int, int] = field(default_factory=dict)
    unions: dict[int, int] = field(default_factory=dict)
    episodes: dict[int, int] = field(default_factory=dict)
    episode_ious: list[float] = field(default_factory=list)

    def add(self, class_id: int, pred: torch.Tensor, gt: torch.Tensor) -> float:
        intersection, union = _counts(pred, gt)
        self.intersections[class_id] = self.intersections.get(class_id, 0) + intersection
        self.unions[class_id] = self.unions.get(class_id, 0) + union
        self.episodes[class_id] = self.episodes.get(class_id, 0) + 1
        value = 1.0 if union == 0 else intersection / union
        self.episode_ious.append(value)
        return value

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        merged = MetricAccumulator()
        for source in (self, other):
            for class_id, count in source.episodes.items():
                merged.intersections[class_id] = (
                    merged.intersections.get(class_id, 0) + source.intersections[class_id]
                )
                merged.unions[class_id] = merged.unions.get(class_id, 0) + source.unions[class_id]
                merged.episodes[class_id] = merged.episodes.get(class_id, 0) + count
            merged.episode_ious.extend(source.episode_ious)
        return merged

    def class_iou(self, class_id: int) -> float:
        union = self.unions[class_id]
        return 1.0 if union == 0 else self.intersections[class_id] / union

    def miou(self) -> float:
        return miou([(c, self.intersections[c], self.unions[c]) for c in sorted(self.episodes)])

    def episode_miou(self) -> float:
        return episode_iou_mean(self.episode_ious)

    def to_frame(self, fold: int, n_shot: int) -> pd.DataFrame:
        """One row per class plus a ``mean`` summary row."""
        rows = [
            {
                "fold": fold,
                "class_id": str(class_id),
                "n_shot": n_shot,
                "iou_accumulated": self.class_iou(class_id),
                "episodes": self.episodes[class_id],
            }
            for class_id in sorted(self.episodes)
        ]
        rows.append(
            {
                "fold": fold,
                "class_id": "mean",
                "n_shot": n_shot,
                "iou_accumulated": self.miou(),
                "episodes": sum(self.episodes.values()),
            }
        )
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def write_table(frame: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path
