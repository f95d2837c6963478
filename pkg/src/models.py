"""Pydantic models and enumerations shared across the package."""
from __future__ import annotations

from enum import Enum
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import DEFAULT_THRESHOLD_TAU, PRESETS, VARIANCE_PAIRS


class Interaction(str, Enum):
    FSA = "FSA"
    TCA = "TCA"


class Injection(str, Enum):
    CONCATENATION = "concatenation"
    MULTIPLICATION = "multiplication"
    ATTENTION_MASK = "attention_mask"
    ADDITION = "addition"


class MultiplicationDomain(str, Enum):
    RGB = "rgb"
    LATENT = "latent"


class FusionStrategy(str, Enum):
    KV = "kv"
    QKV = "qkv"


class SupervisionForm(str, Enum):
    WHITE_ON_BLACK = "white_on_black"
    REAL_FG_BLACK_BG = "real_fg_black_bg"
    BLACK_FG_REAL_BG = "black_fg_real_bg"
    MASK_OVER_IMAGE = "mask_over_image"


class ThresholdMode(str, Enum):
    RELATIVE = "relative"
    ABSOLUTE = "absolute"


class Process(str, Enum):
    MN2M = "MN2M"
    MI2M = "MI2M"
    OI2M = "OI2M"


class ScheduleKind(str, Enum):
    SCALED_LINEAR = "scaled_linear"
    LINEAR = "linear"
    CONSTANT = "constant"


class LrSchedule(str, Enum):
    LINEAR_DECAY = "linear_decay"
    CONSTANT = "constant"


class QueryFill(str, Enum):
    ZEROS = "zeros"
    IMAGE = "image"


class FoldRule(str, Enum):
    INTERLEAVED = "interleaved"
    CONTIGUOUS = "contiguous"


def _split_ints(value: Any) -> Any:
    if isinstance(value, str):
        cleaned = value.strip()
        if cleaned.lower() in {"", "all", "none"}:
            return None
        return tuple(int(part) for part in cleaned.replace("x", ",").split(",") if part.strip())
    return value


class ThresholdConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: ThresholdMode = ThresholdMode.RELATIVE
    tau: float = Field(default=DEFAULT_THRESHOLD_TAU, gt=0.0, lt=1.0)


class GenerationConfig(BaseModel):
    """Generation process plus its noise schedule. OI2M always runs a single step."""

    model_config = ConfigDict(frozen=True)

    process: Process = Process.OI2M
    steps: int = Field(default=50, ge=1)
    variance_pair: str = "beta1"
    beta_start: float = VARIANCE_PAIRS["beta1"][0]
    beta_end: float = VARIANCE_PAIRS["beta1"][1]
    schedule_kind: ScheduleKind = ScheduleKind.SCALED_LINEAR
    train_timesteps: int = Field(default=1000, ge=1)
    ensemble: int = Field(default=1, ge=1)
    multires_noise: bool = False

    @model_validator(mode="before")
    @classmethod
    def _resolve_variance_pair(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        pair = data.get("variance_pair", "beta1")
        if pair in VARIANCE_PAIRS:
            data = {**data, "beta_start": VARIANCE_PAIRS[pair][0], "beta_end": VARIANCE_PAIRS[pair][1]}
        elif pair != "custom":
            raise ValueError(
                f"variance_pair must be one of {sorted(VARIANCE_PAIRS)} or 'custom', got '{pair}'"
            )
        if Process(data.get("process", Process.OI2M)) is Process.OI2M:
            data = {**data, "steps": 1}
        return data

    @model_validator(mode="after")
    def _check_consistency(self) -> "GenerationConfig":
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(
                f"Variance pair must satisfy 0 < beta_start <= beta_end < 1, "
                f"got ({self.beta_start}, {self.beta_end})"
            )
        if self.ensemble > 1 and self.process is not Process.MN2M:
            raise ValueError(f"ensemble > 1 is only supported for MN2M, not {self.process.value}")
        if self.steps > self.train_timesteps:
            raise ValueError("steps cannot exceed train_timesteps")
        return self


class UNetConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_size: tuple[int, int] = (64, 64)
    codec_factor: int = Field(default=4, ge=1)
    widths: tuple[int, ...] = (64, 64)
    blocks_per_level: int = Field(default=1, ge=1)
    heads: int = Field(default=4, ge=1)
    dim_head: int = Field(default=16, ge=1)
    patch_size: int = Field(default=8, ge=1)
    interaction: Interaction = Interaction.FSA
    injection: Injection = Injection.CONCATENATION
    multiplication_domain: MultiplicationDomain = MultiplicationDomain.RGB
    fusion: FusionStrategy = FusionStrategy.KV
    fusion_layers: Optional[tuple[int, ...]] = None
    query_fill: QueryFill = QueryFill.ZEROS
    time_embedding: bool = False
    linear_only: bool = False

    @field_validator("image_size", "widths", "fusion_layers", mode="before")
    @classmethod
    def _split_tuples(cls, value: Any) -> Any:
        return _split_ints(value)

    @model_validator(mode="after")
    def _check_shapes(self) -> "UNetConfig":
        width = self.heads * self.dim_head
        if any(level_width != width for level_width in self.widths):
            raise ValueError(f"every level width must equal heads * dim_head = {width}")
        height, image_width = self.image_size
        factor = self.codec_factor * 2 ** (len(self.widths) - 1)
        if height % factor or image_width % factor:
            raise ValueError(f"image_size {self.image_size} must be divisible by {factor}")
        if height % self.patch_size or image_width % self.patch_size:
            raise ValueError(f"image_size {self.image_size} must be divisible by patch_size")
        num_blocks = 2 * len(self.widths) * self.blocks_per_level
        bad_layers = [i for i in self.fusion_layers or () if not 0 <= i < num_blocks]
        if bad_layers:
            raise ValueError(f"fusion_layers {bad_layers} out of range for {num_blocks} transformer blocks")
        return self

    @property
    def latent_channels(self) -> int:
        return 3 * self.codec_factor**2

    @property
    def latent_size(self) -> tuple[int, int]:
        return self.image_size[0] // self.codec_factor, self.image_size[1] // self.codec_factor

    @property
    def num_patches(self) -> int:
        return (self.image_size[0] // self.patch_size) * (self.image_size[1] // self.patch_size)


class FoldSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(ge=1)
    num_folds: int = Field(ge=1)
    fold_index: int = Field(ge=0)
    rule: FoldRule = FoldRule.INTERLEAVED

    @model_validator(mode="after")
    def _check_fold(self) -> "FoldSpec":
        if self.fold_index >= self.num_folds:
            raise ValueError(f"fold_index {self.fold_index} must be < num_folds {self.num_folds}")
        if self.num_classes % self.num_folds:
            raise ValueError(
                f"num_classes {self.num_classes} must be divisible by num_folds {self.num_folds}"
            )
        return self


class RunConfig(BaseModel):
    """Flat run configuration; every field can be set as ``key = value``."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # architecture and ablation axes
    interaction: Interaction = Interaction.FSA
    injection: Injection = Injection.CONCATENATION
    multiplication_domain: MultiplicationDomain = MultiplicationDomain.RGB
    fusion: FusionStrategy = FusionStrategy.KV
    fusion_layers: Optional[tuple[int, ...]] = None
    supervision_form: SupervisionForm = SupervisionForm.WHITE_ON_BLACK
    query_fill: QueryFill = QueryFill.ZEROS
    canvas: tuple[int, int] = (64, 64)
    codec_factor: int = 4
    widths: tuple[int, ...] = (64, 64)
    blocks_per_level: int = 1
    heads: int = 4
    dim_head: int = 16
    patch_size: int = 8
    linear_only: bool = False

    # generation
    process: Process = Process.OI2M
    steps: int = 50
    variance_pair: str = "beta1"
    beta_start: float = VARIANCE_PAIRS["beta1"][0]
    beta_end: float = VARIANCE_PAIRS["beta1"][1]
    schedule_kind: ScheduleKind = ScheduleKind.SCALED_LINEAR
    train_timesteps: int = 1000
    ensemble: int = 1
    multires_noise: bool = False

    # shots
    n_shot_min: int = Field(default=1, ge=1)
    n_shot_max: int = Field(default=1, ge=1)
    n_shot_infer: int = Field(default=1, ge=1)
    infer_kv_sampling: bool = False

    # optimisation
    lr: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    lr_schedule: LrSchedule = LrSchedule.LINEAR_DECAY
    grad_accum: int = Field(default=4, ge=1)
    iterations: int = Field(default=2000, ge=0)
    log_every: int = Field(default=50, ge=1)
    seed: int = 0

    # post-processing
    threshold_mode: ThresholdMode = ThresholdMode.RELATIVE
    threshold_tau: float = Field(default=DEFAULT_THRESHOLD_TAU, gt=0.0, lt=1.0)

    # data and evaluation protocol
    num_classes: int = Field(default=8, ge=1)
    images_per_class: int = Field(default=12, ge=2)
    num_folds: int = Field(default=4, ge=1)
    fold: int = Field(default=0, ge=0)
    fold_rule: FoldRule = FoldRule.INTERLEAVED
    eval_episodes: int = Field(default=100, ge=1)

    @field_validator("canvas", "widths", "fusion_layers", mode="before")
    @classmethod
    def _split_tuples(cls, value: Any) -> Any:
        return _split_ints(value)

    @model_validator(mode="after")
    def _check_ranges(self) -> "RunConfig":
        if self.n_shot_min > self.n_shot_max:
            raise ValueError(
                f"n_shot_min {self.n_shot_min} must be <= n_shot_max {self.n_shot_max}"
            )
        # Build the derived views eagerly so conflicts fail at construction time.
        _ = self.generation, self.unet, self.fold_spec
        return self

    @classmethod
    def from_sources(
        cls,
        *,
        preset: str = "toy",
        file_values: dict[str, str] | None = None,
        overrides: dict[str, str] | None = None,
    ) -> "RunConfig":
        if preset not in PRESETS:
            raise ValueError(f"Unknown preset '{preset}'. Available presets: {sorted(PRESETS)}")
        data: dict[str, Any] = dict(PRESETS[preset])
        data.update(file_values or {})
        data.update(overrides or {})
        return cls.model_validate(data)

    def with_updates(self, **changes: Any) -> "RunConfig":
        """Returns a validated copy; ``model_copy(update=...)`` alone skips validation."""
        return type(self).model_validate({**self.model_dump(), **changes})

    @property
    def n_shot_train_range(self) -> tuple[int, int]:
        return self.n_shot_min, self.n_shot_max

    @property
    def generation(self) -> GenerationConfig:
        return GenerationConfig(
            process=self.process,
            steps=self.steps,
            variance_pair=self.variance_pair,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            schedule_kind=self.schedule_kind,
            train_timesteps=self.train_timesteps,
            ensemble=self.ensemble,
            multires_noise=self.multires_noise,
        )

    @property
    def threshold(self) -> ThresholdConfig:
        return ThresholdConfig(mode=self.threshold_mode, tau=self.threshold_tau)

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(
            image_size=self.canvas,
            codec_factor=self.codec_factor,
            widths=self.widths,
            blocks_per_level=self.blocks_per_level,
            heads=self.heads,
            dim_head=self.dim_head,
            patch_size=self.patch_size,
            interaction=self.interaction,
            injection=self.injection,
            multiplication_domain=self.multiplication_domain,
            fusion=self.fusion,
            fusion_layers=self.fusion_layers,
            query_fill=self.query_fill,
            time_embedding=self.process is not Process.OI2M,
            linear_only=self.linear_only,
        )

    @property
    def fold_spec(self) -> FoldSpec:
        return FoldSpec(
            num_classes=self.num_classes,
            num_folds=self.num_folds,
            fold_index=self.fold,
            rule=self.fold_rule,
        )


class PredictRequest(BaseModel):
    query_image: str
    support_images: list[str]
    support_masks: list[str]
    checkpoint: Optional[str] = None
    output_dir: Optional[str] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check_pairs(self) -> "PredictRequest":
        if not self.support_images:
            raise ValueError("at least one support image is required")
        if len(self.support_images) != len(self.support_masks):
            raise ValueError("support_images and support_masks must have the same length")
        return self


class PredictResponse(BaseModel):
    session_id: str
    mask_path: str
    score_path: str
    foreground_fraction: float
    status: str
