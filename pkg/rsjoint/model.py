"""
Encoder bundle
==============

A residual backbone (basic blocks for the desk preset, bottleneck blocks for
the ResNet-50 preset) returns one feature map per stage; the pooled feature
is the spatial mean of the last stage. On top of it the student carries a
two-layer projector (contrastive space) and a one-layer predictor (class
logits); the teacher carries a backbone and projector only and never takes
gradients.

Shuffling BN
------------
``shuffled_forward`` permutes the batch, splits it into ``G`` contiguous
groups and forwards every group separately, so each group normalizes with its
own batch statistics the way one device would in multi-GPU training. The
outputs are put back in the original row order before returning.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderSpec
from .errors import ConfigurationError, NumericError, ShapeMismatchError

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


def _bn(channels: int, spec: EncoderSpec) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=spec.bn_eps, momentum=spec.bn_momentum)


def check_finite(tensor: torch.Tensor, layer: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite activations in {layer}", layer)
    return tensor


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, spec: EncoderSpec) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = _bn(out_channels, spec)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = _bn(out_channels, spec)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                _bn(out_channels, spec),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3 (strided), 1x1 expand; ``out_channels`` is the expanded width."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, spec: EncoderSpec) -> None:
        super().__init__()
        mid = out_channels // 4
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn1 = _bn(mid, spec)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = _bn(mid, spec)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.bn3 = _bn(out_channels, spec)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                _bn(out_channels, spec),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """Residual network; ``forward`` returns the globally average-pooled feature."""

    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__()
        self.spec = spec
        if spec.stem == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(3, spec.stem_width, 7, stride=2, padding=3, bias=False),
                _bn(spec.stem_width, spec),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(3, stride=2, padding=1),
            )
        else:
            self.stem = nn.Sequential(
                nn.Conv2d(3, spec.stem_width, 3, padding=1, bias=False),
                _bn(spec.stem_width, spec),
                nn.ReLU(inplace=True),
            )
        block = Bottleneck if spec.block == "bottleneck" else BasicBlock
        stages = []
        in_channels = spec.stem_width
        for index, (width, count) in enumerate(zip(spec.stage_widths, spec.blocks_per_stage)):
            stride = 1 if index == 0 else 2
            blocks = [block(in_channels, width, stride, spec)]
            blocks += [block(width, width, 1, spec) for _ in range(count - 1)]
            stages.append(nn.Sequential(*blocks))
            in_channels = width
        self.stages = nn.ModuleList(stages)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def forward_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = check_finite(self.stem(x), "stem")
        outputs = []
        for index, stage in enumerate(self.stages, start=1):
            x = check_finite(stage(x), f"stage{index}")
            outputs.append(x)
        return outputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return global_average_pool(self.forward_stages(x)[-1])


def global_average_pool(feature_map: torch.Tensor) -> torch.Tensor:
    return feature_map.mean(dim=(2, 3))


class Projector(nn.Sequential):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int) -> None:
        super().__init__(nn.Linear(in_dim, hidden_dim), nn.ReLU(inplace=True), nn.Linear(hidden_dim, out_dim))


class StudentNetwork(nn.Module):
    def __init__(self, spec: EncoderSpec) -> None:
        super().__init__()
        self.backbone = Backbone(spec)
        self.projector = Projector(spec.feature_dim, spec.proj_hidden_dim, spec.proj_out_dim)
        self.predictor = nn.Linear(spec.feature_dim, spec.n_classes)


class TeacherNetwork(nn.Module):
    def __init__(self, backbone: Backbone, projector: Projector) -> None:
        super().__init__()
        self.backbone = backbone
        self.projector = projector
        self.requires_grad_(False)

    @classmethod
    def from_student(cls, student: StudentNetwork) -> "TeacherNetwork":
        return cls(copy.deepcopy(student.backbone), copy.deepcopy(student.projector))


@dataclass
class EncoderBundle:
    spec: EncoderSpec
    student: StudentNetwork
    teacher: TeacherNetwork

    def to(self, dtype: torch.dtype) -> "EncoderBundle":
        self.student.to(dtype)
        self.teacher.to(dtype)
        return self

    def assert_congruent(self) -> None:
        assert_congruent(self.teacher, self.student)


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal for conv/linear weights, zero biases, BN scale 1 shift 0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def seeded(seed: int, build: Callable[[], nn.Module]) -> nn.Module:
    """Build and initialize a module under a private torch RNG seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = build()
        init_weights(module)
    return module


def init_encoder(spec: EncoderSpec, seed: int) -> EncoderBundle:
    """Seeded student; the teacher starts as an exact copy of it."""
    student = seeded(seed, lambda: StudentNetwork(spec))
    assert isinstance(student, StudentNetwork)
    teacher = TeacherNetwork.from_student(student)
    logger.debug("Initialized encoder with %d student parameters", parameter_count(student))
    return EncoderBundle(spec, student, teacher)


def set_mode(module: nn.Module, mode: Mode) -> None:
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown forward mode {mode!r}")
    module.train(mode == "train")


def forward_pooled(backbone: Backbone, batch: torch.Tensor, mode: Mode = "train") -> torch.Tensor:
    """``B x D_b`` pooled features; train mode uses batch statistics and updates running stats."""
    set_mode(backbone, mode)
    return backbone(batch)


def forward_stages(backbone: Backbone, batch: torch.Tensor, mode: Mode = "train") -> List[torch.Tensor]:
    set_mode(backbone, mode)
    return backbone.forward_stages(batch)


def project(projector: nn.Module, pooled: torch.Tensor) -> torch.Tensor:
    """Linear, ReLU, linear, then rows scaled to unit L2 norm (norm floor 1e-12)."""
    return F.normalize(projector(pooled), dim=1, eps=1e-12)


def predict_logits(predictor: nn.Module, pooled: torch.Tensor) -> torch.Tensor:
    return predictor(pooled)


def shuffled_forward(
    encoder: Callable[[torch.Tensor], torch.Tensor],
    batch: torch.Tensor,
    bn_groups: int,
    generator: Optional[torch.Generator] = None,
    permutation: Optional[torch.Tensor] = None,
    mode: Mode = "train",
) -> torch.Tensor:
    """Forward ``batch`` through ``encoder`` with per-group BN statistics over a shuffled order.

    Row ``i`` of the result always corresponds to row ``i`` of ``batch``. In
    eval mode there are no batch statistics, so the permuted batch is
    forwarded in one piece.
    """
    size = batch.shape[0]
    if bn_groups < 1 or size % bn_groups:
        raise ConfigurationError(f"bn_groups {bn_groups} does not divide batch size {size}")
    if isinstance(encoder, nn.Module):
        set_mode(encoder, mode)
    perm = permutation if permutation is not None else torch.randperm(size, generator=generator)
    shuffled = batch[perm]
    if mode == "eval":
        outputs = encoder(shuffled)
    else:
        outputs = torch.cat([encoder(group) for group in shuffled.chunk(bn_groups)])
    return outputs[torch.argsort(perm)]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def shape_manifest(spec: EncoderSpec) -> Dict[str, Tuple[int, ...]]:
    """Student tensor shapes for ``spec``, computed on the meta device."""
    with torch.device("meta"):
        student = StudentNetwork(spec)
    return {name: tuple(t.shape) for name, t in student.state_dict().items()}


def assert_congruent(teacher: nn.Module, student: nn.Module) -> None:
    """Every teacher tensor must exist in the student with the same shape, name for name."""
    student_state = student.state_dict()
    for name, tensor in teacher.state_dict().items():
        if name not in student_state:
            raise ShapeMismatchError(f"student has no tensor named {name}", name)
        if student_state[name].shape != tensor.shape:
            raise ShapeMismatchError(
                f"{name}: teacher shape {tuple(tensor.shape)} != student shape {tuple(student_state[name].shape)}",
                name,
            )
