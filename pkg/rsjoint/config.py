"""
Configuration records
=====================

Every hyperparameter rsjoint reads lives in one of the pydantic models below.
They are frozen, validated on construction and serialize to JSON with one
level of sections, e.g. ``{"alpha": 1.0, "encoder": {"stage_widths": [...]}}``.

The cosine schedule runs between ``lr_min = 0.01`` and ``lr_max = 0.10``,
which brackets the 0.05 starting rate of the step schedule. SGD uses
momentum 0.9 and weight decay 5e-5.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Tuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError

R = TypeVar("R", bound="Record")


class Record(BaseModel):
    """Frozen pydantic model with JSON file helpers."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def build(cls: Type[R], **values: Any) -> R:
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid {cls.__name__}: {exc}") from exc

    @classmethod
    def from_dict(cls: Type[R], data: Dict[str, Any]) -> R:
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid {cls.__name__}: {exc}") from exc

    @classmethod
    def from_file(cls: Type[R], path: Union[str, Path]) -> R:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")

    def with_updates(self: R, **updates: Any) -> R:
        """Return a re-validated copy with ``updates`` applied."""
        data = self.model_dump()
        data.update(updates)
        return type(self).from_dict(data)


class AugmentationPolicy(Record):
    """Strong augmentation parameters (crop, jitter, grayscale, flip, blur)."""

    crop_ratio_min: float = Field(0.2, gt=0.0, le=1.0)
    crop_ratio_max: float = Field(1.0, gt=0.0, le=1.0)
    aspect_ratio_min: float = Field(3.0 / 4.0, gt=0.0)
    aspect_ratio_max: float = Field(4.0 / 3.0, gt=0.0)
    # desk-sized default; TrainingConfig.full() and EncoderSpec.resnet50() use 224
    out_size: int = Field(32, gt=0)
    p_color_jitter: float = Field(0.8, ge=0.0, le=1.0)
    jitter_brightness: float = Field(0.4, ge=0.0)
    jitter_contrast: float = Field(0.4, ge=0.0)
    jitter_saturation: float = Field(0.4, ge=0.0)
    jitter_hue: float = Field(0.16, ge=0.0, le=0.5)
    p_grayscale: float = Field(0.2, ge=0.0, le=1.0)
    p_hflip: float = Field(0.5, ge=0.0, le=1.0)
    p_blur: float = Field(0.5, ge=0.0, le=1.0)
    blur_sigma_min: float = Field(0.1, gt=0.0)
    blur_sigma_max: float = Field(2.0, gt=0.0)

    @model_validator(mode="after")
    def _ordered_ranges(self) -> "AugmentationPolicy":
        if self.crop_ratio_min > self.crop_ratio_max:
            raise ValueError("crop_ratio_min must not exceed crop_ratio_max")
        if self.aspect_ratio_min > self.aspect_ratio_max:
            raise ValueError("aspect_ratio_min must not exceed aspect_ratio_max")
        if self.blur_sigma_min > self.blur_sigma_max:
            raise ValueError("blur_sigma_min must not exceed blur_sigma_max")
        return self

    @classmethod
    def identity(cls, out_size: int = 32) -> "AugmentationPolicy":
        """Every transform disabled and the crop fixed to the full image."""
        return cls(
            crop_ratio_min=1.0,
            crop_ratio_max=1.0,
            out_size=out_size,
            p_color_jitter=0.0,
            p_grayscale=0.0,
            p_hflip=0.0,
            p_blur=0.0,
        )


class Normalization(Record):
    """Per-channel standardization applied after augmentation."""

    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    @model_validator(mode="after")
    def _positive_std(self) -> "Normalization":
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        return self


class EncoderSpec(Record):
    """Residual backbone plus projector/predictor head sizes."""

    stage_widths: List[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: List[int] = Field(default_factory=lambda: [1, 1, 1, 1])
    block: Literal["basic", "bottleneck"] = "basic"
    stem: Literal["small", "imagenet"] = "small"
    stem_width: int = Field(16, gt=0)
    input_size: int = Field(32, gt=0)
    proj_hidden_dim: int = Field(128, gt=0)
    proj_out_dim: int = Field(128, ge=2)
    n_classes: int = Field(10, ge=2)
    bn_groups: int = Field(4, ge=2)
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def _consistent_stages(self) -> "EncoderSpec":
        if len(self.stage_widths) != len(self.blocks_per_stage):
            raise ValueError("stage_widths and blocks_per_stage must have equal length")
        if len(self.stage_widths) < 2:
            raise ValueError("at least two stages are required")
        if any(w <= 0 for w in self.stage_widths) or any(b <= 0 for b in self.blocks_per_stage):
            raise ValueError("stage widths and block counts must be positive")
        if self.block == "bottleneck" and any(w % 4 for w in self.stage_widths):
            raise ValueError("bottleneck stage widths must be divisible by 4")
        if self.input_size % self.total_stride:
            raise ValueError(
                f"input_size {self.input_size} is not divisible by the backbone stride {self.total_stride}"
            )
        return self

    @property
    def total_stride(self) -> int:
        stem_stride = 4 if self.stem == "imagenet" else 1
        return stem_stride * 2 ** (len(self.stage_widths) - 1)

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    @classmethod
    def desk(cls, **overrides: Any) -> "EncoderSpec":
        return cls.build(**overrides)

    @classmethod
    def resnet50(cls, **overrides: Any) -> "EncoderSpec":
        values: Dict[str, Any] = dict(
            stage_widths=[256, 512, 1024, 2048],
            blocks_per_stage=[3, 4, 6, 3],
            block="bottleneck",
            stem="imagenet",
            stem_width=64,
            input_size=224,
            proj_hidden_dim=2048,
            proj_out_dim=128,
            n_classes=1000,
        )
        values.update(overrides)
        return cls.build(**values)


class CosineRestartSchedule(Record):
    """Cosine annealing with restarts every ``t_max`` epochs."""

    lr_min: float = Field(0.01, ge=0.0)
    lr_max: float = Field(0.10, ge=0.0)
    t_max: int = Field(20, ge=1)

    @model_validator(mode="after")
    def _ordered(self) -> "CosineRestartSchedule":
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        return self


class StepSchedule(Record):
    """Multiply ``base_lr`` by ``gamma`` at every milestone epoch."""

    base_lr: float = Field(0.01, gt=0.0)
    milestones: List[int] = Field(default_factory=lambda: [30, 60, 90])
    gamma: float = Field(0.1, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _increasing(self) -> "StepSchedule":
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(m < 0 for m in self.milestones):
            raise ValueError("milestones must be non-negative")
        return self


class OptimizerConfig(Record):
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-5, ge=0.0)
    exclude_norm_and_bias: bool = False


class TrainingConfig(Record):
    """Everything one pre-training run depends on. Defaults are the desk preset."""

    encoder: EncoderSpec = Field(default_factory=EncoderSpec)
    augment: AugmentationPolicy = Field(default_factory=AugmentationPolicy)
    normalization: Normalization = Field(default_factory=Normalization)
    alpha: float = Field(1.0, ge=0.0)
    tau: float = Field(0.07, gt=0.0)
    ema_m: float = Field(0.996, ge=0.0, le=1.0)
    queue_capacity: int = Field(1024, gt=0)
    batch_size: int = Field(32, gt=0)
    epochs: int = Field(15, ge=1)
    scheduler: Literal["cosine", "step"] = "cosine"
    cosine: CosineRestartSchedule = Field(default_factory=CosineRestartSchedule)
    step: StepSchedule = Field(default_factory=lambda: StepSchedule(base_lr=0.05))
    lr_per_iteration: bool = False
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    teacher_bn_stats: Literal["copy", "ema"] = "copy"
    branches: Literal["joint", "rscl", "nial"] = "joint"
    prefetch: int = Field(2, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _cross_checks(self) -> "TrainingConfig":
        if self.batch_size % self.encoder.bn_groups:
            raise ValueError(
                f"batch_size {self.batch_size} is not divisible by bn_groups {self.encoder.bn_groups}"
            )
        if self.augment.out_size != self.encoder.input_size:
            raise ValueError("augment.out_size must equal encoder.input_size")
        if self.queue_capacity < self.batch_size:
            raise ValueError("queue_capacity must be at least batch_size")
        return self

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainingConfig":
        return cls.build(**overrides)

    @classmethod
    def full(cls, **overrides: Any) -> "TrainingConfig":
        values: Dict[str, Any] = dict(
            encoder=EncoderSpec.resnet50(),
            augment=AugmentationPolicy(out_size=224),
            queue_capacity=65_536,
            batch_size=128,
            epochs=100,
        )
        values.update(overrides)
        return cls.build(**values)


class SyntheticCorpusSpec(Record):
    """Seeded procedural stand-in for the natural and RS corpora."""

    n_natural: int = Field(2000, gt=0)
    n_rs: int = Field(2000, gt=0)
    n_scenes: int = Field(1000, gt=0)
    k_classes: int = Field(10, ge=2)
    image_size: int = Field(32, ge=2)
    seed: int = 7


class EvalProtocol(Record):
    """Downstream classification protocol (fine-tune, probe, stage probe)."""

    mode: Literal["finetune", "probe", "stage_probe"] = "finetune"
    train_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    trials: int = Field(5, ge=1)
    epochs: int = Field(30, ge=1)
    schedule: StepSchedule = Field(
        default_factory=lambda: StepSchedule(base_lr=0.01, milestones=[10, 20, 25])
    )
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(64, gt=0)
    flip_p: float = Field(0.5, ge=0.0, le=1.0)
    # desk-sized default; EvalProtocol.full() resizes to 224
    resize: int = Field(32, gt=0)
    pool_grid: int = Field(2, ge=1)
    from_scratch: bool = False
    normalization: Normalization = Field(default_factory=Normalization)
    seed: int = 0

    @classmethod
    def desk(cls, **overrides: Any) -> "EvalProtocol":
        return cls.build(**overrides)

    @classmethod
    def full(cls, **overrides: Any) -> "EvalProtocol":
        values: Dict[str, Any] = dict(
            epochs=100,
            schedule=StepSchedule(base_lr=0.01, milestones=[30, 60, 90]),
            resize=224,
        )
        values.update(overrides)
        return cls.build(**values)


def leaf_fields(model_cls: Type[BaseModel], prefix: Tuple[str, ...] = ()) -> Iterator[Tuple[Tuple[str, ...], Any]]:
    """Yield ``(path, annotation)`` for every non-record field, one section deep."""
    for name, info in model_cls.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, Record):
            yield from leaf_fields(annotation, prefix + (name,))
        else:
            yield prefix + (name,), annotation


def with_overrides(record: R, overrides: Dict[Tuple[str, ...], Any]) -> R:
    """Apply leaf overrides addressed by field path and re-validate."""
    data = record.model_dump()
    for path, value in overrides.items():
        target = data
        for key in path[:-1]:
            target = target[key]
        target[path[-1]] = value
    return type(record).from_dict(data)
