"""
Downstream evaluation
=====================

Three protocols share one trial loop:

- ``finetune``: the pre-trained backbone plus a fresh linear head, every
  parameter trained.
- ``probe``: backbone frozen in eval mode, a linear head on the pooled
  feature.
- ``stage_probe``: one linear head per backbone stage on the stage output
  average-pooled to a ``pool_grid x pool_grid`` grid and flattened.

Each trial draws its own train/test split and head initialization from
``(protocol.seed, trial)``. Accuracies are top-1 with ties going to the
lowest class index; the reported spread is the population standard deviation
over trials.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field

from .checkpoint import load_backbone
from .config import EncoderSpec, EvalProtocol
from .data import LabeledDataset, resize_and_standardize
from .errors import ConfigurationError
from .model import Backbone, global_average_pool, seeded
from .schedule import build_optimizer, sgd_step, step_lr

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class EvalReport(BaseModel):
    mode: str
    accuracies: List[float]
    mean: float
    std: float
    std_kind: str = "population"
    stage_accuracies: Optional[List[List[float]]] = None
    stage_mean: Optional[List[float]] = None
    stage_std: Optional[List[float]] = None
    checkpoint: Optional[str] = None
    protocol: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def from_trials(
        cls,
        protocol: EvalProtocol,
        accuracies: Sequence[float],
        stage_accuracies: Optional[Sequence[Sequence[float]]] = None,
        checkpoint: Optional[PathLike] = None,
    ) -> "EvalReport":
        mean, std = mean_std(accuracies)
        stage_mean = stage_std = None
        stages = None
        if stage_accuracies is not None:
            stages = [list(map(float, trial)) for trial in stage_accuracies]
            per_stage = list(zip(*stages))
            stage_mean = [mean_std(s)[0] for s in per_stage]
            stage_std = [mean_std(s)[1] for s in per_stage]
        return cls(
            mode=protocol.mode,
            accuracies=[float(a) for a in accuracies],
            mean=mean,
            std=std,
            stage_accuracies=stages,
            stage_mean=stage_mean,
            stage_std=stage_std,
            checkpoint=str(checkpoint) if checkpoint is not None else None,
            protocol=protocol.model_dump(mode="json"),
        )

    def summary(self) -> str:
        return f"{self.mode}: {100 * self.mean:.2f} ± {100 * self.std:.2f} over {len(self.accuracies)} trials"

    def write(self, path: PathLike) -> None:
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def top1_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest index."""
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    if logits.shape[0] == 0:
        return 0.0
    return float((logits.argmax(dim=1) == labels).double().mean())


def split_indices(n: int, train_fraction: float, seed: int, trial: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint train/test split for one trial; both sides are non-empty."""
    if n < 2:
        raise ConfigurationError("evaluation needs at least two labeled images")
    rng = np.random.default_rng([seed, trial])
    order = rng.permutation(n)
    n_train = min(n - 1, max(1, int(round(n * train_fraction))))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


# --------------------------------------------------------------------------
# Backbone sources
# --------------------------------------------------------------------------


def _backbone(
    checkpoint: Optional[PathLike], protocol: EvalProtocol, encoder: Optional[EncoderSpec], trial: int
) -> Backbone:
    if protocol.from_scratch or checkpoint is None:
        if encoder is None and checkpoint is not None:
            _, config = load_backbone(checkpoint)
            encoder = config.encoder
        spec = encoder or EncoderSpec.desk(input_size=protocol.resize)
        backbone = seeded(protocol.seed * 1000 + trial, lambda: Backbone(spec))
        assert isinstance(backbone, Backbone)
    else:
        backbone, _ = load_backbone(checkpoint, encoder)
    if protocol.resize % backbone.spec.total_stride:
        raise ConfigurationError(
            f"resize {protocol.resize} is not divisible by the backbone stride {backbone.spec.total_stride}"
        )
    return backbone


def _head(in_dim: int, n_classes: int, seed: int) -> nn.Linear:
    head = seeded(seed, lambda: nn.Linear(in_dim, n_classes))
    assert isinstance(head, nn.Linear)
    return head


def _check_classes(dataset: LabeledDataset, n_classes: Optional[int]) -> int:
    if n_classes is not None and n_classes != dataset.n_classes:
        raise ConfigurationError(f"head has {n_classes} classes, dataset has {dataset.n_classes}")
    return dataset.n_classes


def _batches(indices: np.ndarray, batch_size: int) -> List[np.ndarray]:
    # BN in train mode cannot normalize a single sample
    return [chunk for chunk in np.array_split(indices, max(1, -(-len(indices) // batch_size))) if len(chunk) > 1]


def _flip_rows(x: torch.Tensor, rng: np.random.Generator, p: float) -> torch.Tensor:
    mask = torch.from_numpy(rng.random(x.shape[0]) < p)
    if mask.any():
        x = x.clone()
        x[mask] = x[mask].flip(-1)
    return x


def _predict(model: nn.Module, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([model(chunk) for chunk in images.split(batch_size)])


# --------------------------------------------------------------------------
# Fine-tuning
# --------------------------------------------------------------------------


def _finetune_trial(
    images: torch.Tensor,
    labels: torch.Tensor,
    n_classes: int,
    protocol: EvalProtocol,
    trial: int,
    checkpoint: Optional[PathLike],
    encoder: Optional[EncoderSpec],
) -> float:
    train_idx, test_idx = split_indices(len(labels), protocol.train_fraction, protocol.seed, trial)
    backbone = _backbone(checkpoint, protocol, encoder, trial)
    model = nn.Sequential(backbone, _head(backbone.feature_dim, n_classes, protocol.seed * 1000 + trial))
    state = build_optimizer(
        model.parameters(), lr=protocol.schedule.base_lr, momentum=protocol.momentum, weight_decay=protocol.weight_decay
    )
    rng = np.random.default_rng([protocol.seed, trial, 1])
    for epoch in range(protocol.epochs):
        lr = step_lr(epoch, protocol.schedule)
        model.train()
        for idx in _batches(rng.permutation(train_idx), protocol.batch_size):
            x = _flip_rows(images[idx], rng, protocol.flip_p)
            loss = F.cross_entropy(model(x), labels[idx])
            state.zero_grad()
            loss.backward()
            sgd_step(state, lr)
    model.eval()
    return top1_accuracy(_predict(model, images[test_idx], protocol.batch_size), labels[test_idx])


def finetune_classifier(
    checkpoint: Optional[PathLike],
    dataset: LabeledDataset,
    protocol: EvalProtocol,
    encoder: Optional[EncoderSpec] = None,
    n_classes: Optional[int] = None,
) -> EvalReport:
    """Fine-tune backbone plus a fresh linear head; ``checkpoint=None`` trains from scratch."""
    k = _check_classes(dataset, n_classes)
    images = resize_and_standardize(dataset.images, protocol.resize, protocol.normalization)
    labels = torch.from_numpy(dataset.label_array()).long()
    accuracies = []
    for trial in range(protocol.trials):
        acc = _finetune_trial(images, labels, k, protocol, trial, checkpoint, encoder)
        logger.info("🎯 finetune trial %d/%d top-1 %.2f%%", trial + 1, protocol.trials, 100 * acc)
        accuracies.append(acc)
    report = EvalReport.from_trials(protocol.with_updates(mode="finetune"), accuracies, checkpoint=checkpoint)
    logger.info("📊 %s", report.summary())
    return report


# --------------------------------------------------------------------------
# Frozen-feature probes
# --------------------------------------------------------------------------


def pool_to_grid(feature_map: torch.Tensor, grid: int) -> torch.Tensor:
    """Average-pool to ``grid x grid`` and flatten; ``grid == 1`` is the plain global average."""
    if grid == 1:
        return global_average_pool(feature_map)
    return F.adaptive_avg_pool2d(feature_map, grid).flatten(1)


def extract_features(
    backbone: Backbone, images: torch.Tensor, batch_size: int, grid: Optional[int] = None
) -> List[torch.Tensor]:
    """Frozen eval-mode features: ``[pooled]`` when ``grid`` is None, else one pooled map per stage."""
    backbone.eval()
    outputs: List[List[torch.Tensor]] = []
    with torch.no_grad():
        for chunk in images.split(batch_size):
            if grid is None:
                outputs.append([backbone(chunk)])
            else:
                outputs.append([pool_to_grid(s, grid) for s in backbone.forward_stages(chunk)])
    return [torch.cat(parts) for parts in zip(*outputs)]


def train_linear_head(
    train_x: torch.Tensor,
    train_x_flipped: torch.Tensor,
    train_y: torch.Tensor,
    test_x: torch.Tensor,
    test_y: torch.Tensor,
    n_classes: int,
    protocol: EvalProtocol,
    trial: int,
) -> float:
    """SGD-train a linear classifier on fixed features; flips pick the mirrored feature row."""
    head = _head(train_x.shape[1], n_classes, protocol.seed * 1000 + trial)
    state = build_optimizer(
        head.parameters(), lr=protocol.schedule.base_lr, momentum=protocol.momentum, weight_decay=protocol.weight_decay
    )
    rng = np.random.default_rng([protocol.seed, trial, 1])
    rows = np.arange(len(train_y))
    for epoch in range(protocol.epochs):
        lr = step_lr(epoch, protocol.schedule)
        for idx in np.array_split(rng.permutation(rows), max(1, -(-len(rows) // protocol.batch_size))):
            if not len(idx):
                continue
            flip = torch.from_numpy(rng.random(len(idx)) < protocol.flip_p).unsqueeze(1)
            x = torch.where(flip, train_x_flipped[idx], train_x[idx])
            loss = F.cross_entropy(head(x), train_y[idx])
            state.zero_grad()
            loss.backward()
            sgd_step(state, lr)
    with torch.no_grad():
        return top1_accuracy(head(test_x), test_y)


def _probe(
    checkpoint: Optional[PathLike],
    dataset: LabeledDataset,
    protocol: EvalProtocol,
    encoder: Optional[EncoderSpec],
    n_classes: Optional[int],
    grid: Optional[int],
) -> Tuple[List[float], List[List[float]]]:
    k = _check_classes(dataset, n_classes)
    images = resize_and_standardize(dataset.images, protocol.resize, protocol.normalization)
    labels = torch.from_numpy(dataset.label_array()).long()
    accuracies: List[float] = []
    per_stage: List[List[float]] = []
    for trial in range(protocol.trials):
        backbone = _backbone(checkpoint, protocol, encoder, trial)
        plain = extract_features(backbone, images, protocol.batch_size, grid)
        flipped = extract_features(backbone, images.flip(-1), protocol.batch_size, grid)
        train_idx, test_idx = split_indices(len(labels), protocol.train_fraction, protocol.seed, trial)
        stage_acc = [
            train_linear_head(
                x[train_idx], xf[train_idx], labels[train_idx], x[test_idx], labels[test_idx], k, protocol, trial
            )
            for x, xf in zip(plain, flipped)
        ]
        logger.info(
            "🎯 %s trial %d/%d top-1 %s",
            protocol.mode,
            trial + 1,
            protocol.trials,
            ", ".join(f"{100 * a:.2f}%" for a in stage_acc),
        )
        accuracies.append(stage_acc[-1])
        per_stage.append(stage_acc)
    return accuracies, per_stage


def linear_probe(
    checkpoint: Optional[PathLike],
    dataset: LabeledDataset,
    protocol: EvalProtocol,
    encoder: Optional[EncoderSpec] = None,
    n_classes: Optional[int] = None,
) -> EvalReport:
    """Linear head on frozen pooled features (BN in eval mode, backbone untouched)."""
    protocol = protocol.with_updates(mode="probe")
    accuracies, _ = _probe(checkpoint, dataset, protocol, encoder, n_classes, grid=None)
    report = EvalReport.from_trials(protocol, accuracies, checkpoint=checkpoint)
    logger.info("📊 %s", report.summary())
    return report


def stagewise_probe(
    checkpoint: Optional[PathLike],
    dataset: LabeledDataset,
    protocol: EvalProtocol,
    encoder: Optional[EncoderSpec] = None,
    n_classes: Optional[int] = None,
) -> EvalReport:
    """One linear head per stage; the headline accuracy is the last stage's."""
    protocol = protocol.with_updates(mode="stage_probe")
    accuracies, per_stage = _probe(checkpoint, dataset, protocol, encoder, n_classes, grid=protocol.pool_grid)
    report = EvalReport.from_trials(protocol, accuracies, per_stage, checkpoint=checkpoint)
    logger.info("📊 %s; per stage %s", report.summary(), [round(100 * m, 2) for m in report.stage_mean or []])
    return report


def evaluate(
    checkpoint: Optional[PathLike],
    dataset: LabeledDataset,
    protocol: EvalProtocol,
    encoder: Optional[EncoderSpec] = None,
) -> EvalReport:
    runners = {"finetune": finetune_classifier, "probe": linear_probe, "stage_probe": stagewise_probe}
    return runners[protocol.mode](checkpoint, dataset, protocol, encoder)
