"""
Joint pre-training loop
=======================

One iteration:

1. student query features ``z_q`` from the first RS view (train-mode BN)
2. teacher key features ``z_k`` from the second RS view through shuffling
   BN, without gradient tracking
3. student class logits on the natural images
4. ``l_total = info_nce(z_q, z_k, queue, tau) + alpha * cross_entropy(...)``
5. backward through the student, SGD step
6. EMA update of the teacher, then ``z_k`` is pushed into the queue

``branches="rscl"`` skips steps 3 and the cross-entropy term; ``"nial"``
skips steps 1, 2 and 6.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainingConfig
from .data import BatchPrefetcher, DualBatch, LabeledDataset, SamplerState, UnlabeledDataset, next_dual_batch
from .errors import ConfigurationError, NonFiniteLossError
from .model import EncoderBundle, forward_pooled, init_encoder, predict_logits, project, shuffled_forward
from .objective import LossBreakdown, NegativeQueue, cross_entropy, ema_update, info_nce, queue_push, total_loss
from .schedule import OptimizerState, build_optimizer, lr_for_epoch, sgd_step, step_lr

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class TrainState:
    config: TrainingConfig
    bundle: EncoderBundle
    queue: NegativeQueue
    optimizer: OptimizerState
    generator: torch.Generator
    epoch: int = 0
    iteration: int = 0
    step_in_epoch: int = 0
    history: List[LossBreakdown] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainingConfig, bundle: Optional[EncoderBundle] = None) -> "TrainState":
        bundle = bundle or init_encoder(config.encoder, config.seed)
        queue = NegativeQueue(config.queue_capacity, config.encoder.proj_out_dim)
        optimizer = build_optimizer(
            bundle.student.parameters(),
            lr=learning_rate(config, 0),
            momentum=config.optimizer.momentum,
            weight_decay=config.optimizer.weight_decay,
            exclude_norm_and_bias=config.optimizer.exclude_norm_and_bias,
        )
        generator = torch.Generator().manual_seed(config.seed)
        return cls(config, bundle, queue, optimizer, generator)


def learning_rate(config: TrainingConfig, epoch: int, fraction: float = 0.0) -> float:
    if config.scheduler == "step":
        return step_lr(epoch, config.step)
    return lr_for_epoch(epoch, config.cosine, fraction)


def compute_losses(state: TrainState, batch: DualBatch) -> Tuple[LossBreakdown, Optional[torch.Tensor]]:
    """Forward both branches; returns the differentiable breakdown and the teacher keys."""
    cfg = state.config
    student, teacher = state.bundle.student, state.bundle.teacher
    zero = batch.rs_view_q.new_zeros(())
    keys: Optional[torch.Tensor] = None

    if cfg.branches == "nial":
        l_ct = zero
    else:
        z_q = project(student.projector, forward_pooled(student.backbone, batch.rs_view_q, "train"))
        with torch.no_grad():
            pooled_k = shuffled_forward(
                teacher.backbone, batch.rs_view_k, cfg.encoder.bn_groups, generator=state.generator
            )
            keys = project(teacher.projector, pooled_k)
        l_ct = info_nce(z_q, keys, state.queue, cfg.tau)

    if cfg.branches == "rscl":
        l_ce = zero
    else:
        logits = predict_logits(student.predictor, forward_pooled(student.backbone, batch.natural_images, "train"))
        l_ce = cross_entropy(logits, batch.natural_labels)

    return total_loss(l_ct, l_ce, cfg.alpha), keys


def train_step(state: TrainState, batch: DualBatch, lr: float) -> Tuple[TrainState, LossBreakdown]:
    """One optimization iteration; returns the state and the step's float loss breakdown."""
    breakdown, keys = compute_losses(state, batch)
    values = breakdown.as_floats()
    if not all(math.isfinite(v) for v in (values.l_ct, values.l_ce, values.l_total)):
        logger.error(
            "💥 Non-finite loss at iteration %d (epoch %d): %s", state.iteration, state.epoch, values.to_dict()
        )
        raise NonFiniteLossError(state.iteration, values.to_dict())

    state.optimizer.zero_grad()
    assert isinstance(breakdown.l_total, torch.Tensor)
    breakdown.l_total.backward()
    sgd_step(state.optimizer, lr)

    if keys is not None:
        ema_update(state.bundle.teacher, state.bundle.student, state.config.ema_m, state.config.teacher_bn_stats)
        queue_push(state.queue, keys)

    state.iteration += 1
    state.step_in_epoch += 1
    state.history.append(values)
    logger.debug(
        "step %d lr=%.5f l_ct=%.4f l_ce=%.4f l_total=%.4f",
        state.iteration,
        lr,
        values.l_ct,
        values.l_ce,
        values.l_total,
    )
    return state, values


def _batches(
    config: TrainingConfig, sampler: SamplerState, labeled: LabeledDataset, unlabeled: UnlabeledDataset
) -> Iterator[DualBatch]:
    while True:
        batch, _ = next_dual_batch(
            sampler, labeled, unlabeled, config.augment, config.batch_size, config.normalization
        )
        yield batch


def metrics_path_for(out_path: PathLike) -> Path:
    out = Path(out_path)
    return out.with_name(out.name + ".metrics.jsonl")


def pretrain(
    config: TrainingConfig,
    labeled: LabeledDataset,
    unlabeled: UnlabeledDataset,
    out_path: PathLike,
    resume_from: Optional[PathLike] = None,
) -> Checkpoint:
    """Run ``config.epochs`` epochs of ``floor(|unlabeled| / B)`` steps and write the checkpoint.

    The metric log goes to ``<out_path>.metrics.jsonl``, one JSON object per
    iteration. On an I/O failure the partial metric log is removed.
    """
    if labeled.n_classes != config.encoder.n_classes:
        raise ConfigurationError(
            f"natural dataset has {labeled.n_classes} classes, encoder predictor has {config.encoder.n_classes}"
        )
    steps = len(unlabeled) // config.batch_size
    if steps == 0:
        logger.warning(
            "⚠️ RS corpus (%d images) is smaller than one batch (%d); running one wrapped step per epoch",
            len(unlabeled),
            config.batch_size,
        )
        steps = 1

    bundle = None
    if resume_from is not None:
        bundle, _ = load_checkpoint(resume_from, expected=config)
        logger.info("🔁 Resuming student weights from %s", resume_from)
    state = TrainState.create(config, bundle)
    sampler = SamplerState.create(config.seed, len(labeled), len(unlabeled))

    prefetcher: Optional[BatchPrefetcher] = None
    batches: Iterator[DualBatch]
    if config.prefetch > 0:
        prefetcher = BatchPrefetcher(
            sampler, labeled, unlabeled, config.augment, config.batch_size, config.normalization, config.prefetch
        ).start()
        batches = prefetcher
    else:
        batches = _batches(config, sampler, labeled, unlabeled)

    out = Path(out_path)
    metrics_path = metrics_path_for(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    logger.info(
        "🚀 Pre-training %s branches for %d epochs x %d steps (batch %d, alpha %.3g, SGD momentum %.3g, wd %.3g)",
        config.branches,
        config.epochs,
        steps,
        config.batch_size,
        config.alpha,
        state.optimizer.momentum,
        state.optimizer.weight_decay,
    )
    try:
        with open(metrics_path, "w", encoding="utf-8") as metrics:
            for epoch in range(config.epochs):
                state.epoch = epoch
                state.step_in_epoch = 0
                epoch_lr = learning_rate(config, epoch)
                state.lr_history.append(epoch_lr)
                totals = np.zeros(3)
                for step in range(steps):
                    lr = learning_rate(config, epoch, step / steps) if config.lr_per_iteration else epoch_lr
                    _, losses = train_step(state, next(batches), lr)
                    totals += (losses.l_ct, losses.l_ce, losses.l_total)
                    record: Dict[str, Any] = {"iteration": state.iteration, "epoch": epoch, "lr": lr}
                    record.update(losses.to_dict())
                    metrics.write(json.dumps(record) + "\n")
                means = totals / steps
                logger.info(
                    "📈 epoch %d/%d lr=%.5f l_ct=%.4f l_ce=%.4f l_total=%.4f queue=%d/%d",
                    epoch + 1,
                    config.epochs,
                    epoch_lr,
                    means[0],
                    means[1],
                    means[2],
                    state.queue.filled,
                    state.queue.capacity,
                )
        state.epoch = config.epochs
        wall_time = time.perf_counter() - started
        checkpoint = save_checkpoint(
            state, out, metadata={"wall_time_s": round(wall_time, 3), "steps_per_epoch": steps}
        )
    except OSError:
        metrics_path.unlink(missing_ok=True)
        raise
    finally:
        if prefetcher is not None:
            prefetcher.close()
    logger.info("✅ Pre-training finished in %.1fs, checkpoint %s", wall_time, out)
    return checkpoint
