"""Losses, the negative-key queue and the momentum (EMA) coupling rule."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Literal, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)

Scalar = Union[float, torch.Tensor]


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean ``-log softmax(logits)[label]`` (log-sum-exp stabilized)."""
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm teacher keys.

    ``head`` is the next write slot and ``filled`` the number of valid rows;
    once full, every push overwrites the oldest rows first.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32) -> None:
        if capacity <= 0 or dim <= 0:
            raise ValueError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.head = 0
        self.filled = 0

    @property
    def dim(self) -> int:
        return int(self.storage.shape[1])

    def push(self, keys: torch.Tensor) -> None:
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeMismatchError(f"keys of shape {tuple(keys.shape)} do not match queue dim {self.dim}", "keys")
        count = keys.shape[0]
        if count > self.capacity:
            raise ValueError(f"cannot push {count} keys into a queue of capacity {self.capacity}")
        norms = keys.detach().norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("queue keys must be unit-norm rows")
        slots = (self.head + torch.arange(count)) % self.capacity
        self.storage[slots] = keys.detach().to(self.storage.dtype)
        self.head = (self.head + count) % self.capacity
        self.filled = min(self.filled + count, self.capacity)

    def valid_rows(self) -> torch.Tensor:
        """Valid rows in storage order (loss computations are order-free)."""
        return self.storage[: self.filled]

    def snapshot(self) -> torch.Tensor:
        """Valid rows oldest first."""
        if self.filled < self.capacity:
            return self.storage[: self.filled].clone()
        return torch.cat([self.storage[self.head :], self.storage[: self.head]])


def queue_push(queue: NegativeQueue, keys: torch.Tensor) -> NegativeQueue:
    queue.push(keys)
    return queue


def info_nce(z_q: torch.Tensor, z_k_plus: torch.Tensor, queue: NegativeQueue, tau: float) -> torch.Tensor:
    """InfoNCE over ``[positive, queue negatives] / tau`` with the positive at index 0.

    An empty queue is legal: the loss then sees the positive only.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z_q.shape != z_k_plus.shape:
        raise ShapeMismatchError(f"z_q {tuple(z_q.shape)} and z_k {tuple(z_k_plus.shape)} differ", "z_k_plus")
    if queue.dim != z_q.shape[1]:
        raise ShapeMismatchError(f"queue dim {queue.dim} != feature dim {z_q.shape[1]}", "queue")
    positive = (z_q * z_k_plus).sum(dim=1, keepdim=True)
    negatives = z_q @ queue.valid_rows().to(z_q.dtype).T
    logits = torch.cat([positive, negatives], dim=1) / tau
    target = torch.zeros(z_q.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


@dataclass
class LossBreakdown:
    l_ct: Scalar
    l_ce: Scalar
    l_total: Scalar
    alpha: float

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(float(self.l_ct), float(self.l_ce), float(self.l_total), float(self.alpha))

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in asdict(self.as_floats()).items()}


def total_loss(l_ct: Scalar, l_ce: Scalar, alpha: float = 1.0) -> LossBreakdown:
    """``l_total = l_ct + alpha * l_ce``."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return LossBreakdown(l_ct, l_ce, l_ct + alpha * l_ce, alpha)


@torch.no_grad()
def ema_update(
    teacher: nn.Module,
    student: nn.Module,
    m: float,
    bn_stats: Literal["copy", "ema"] = "copy",
) -> nn.Module:
    """``W_t <- m W_t + (1 - m) W_s`` for every teacher parameter, matched by name.

    BN running statistics are copied from the student (``bn_stats="copy"``) or
    averaged with the same rule (``"ema"``); integer buffers are always copied.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    student_params = dict(student.named_parameters())
    for name, w_t in teacher.named_parameters():
        w_s = student_params.get(name)
        if w_s is None:
            raise ShapeMismatchError(f"student has no parameter named {name}", name)
        if w_s.shape != w_t.shape:
            raise ShapeMismatchError(
                f"{name}: teacher shape {tuple(w_t.shape)} != student shape {tuple(w_s.shape)}", name
            )
        w_t.mul_(m).add_(w_s, alpha=1.0 - m)

    student_buffers = dict(student.named_buffers())
    for name, b_t in teacher.named_buffers():
        b_s = student_buffers.get(name)
        if b_s is None or b_s.shape != b_t.shape:
            raise ShapeMismatchError(f"student buffer {name} is missing or differs in shape", name)
        if bn_stats == "ema" and b_t.is_floating_point():
            b_t.mul_(m).add_(b_s, alpha=1.0 - m)
        else:
            b_t.copy_(b_s)
    return teacher
