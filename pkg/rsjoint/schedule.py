"""Learning-rate schedules and the SGD-with-momentum update."""

import bisect
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional

import torch

from .config import CosineRestartSchedule, StepSchedule
from .errors import ShapeMismatchError

logger = logging.getLogger(__name__)


def cosine_restart_lr(t_cur: float, sched: CosineRestartSchedule) -> float:
    """``lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t_cur / t_max))`` for ``t_cur`` in ``[0, t_max]``."""
    if not 0.0 <= t_cur <= sched.t_max:
        raise ValueError(f"t_cur {t_cur} outside [0, {sched.t_max}]")
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * t_cur / sched.t_max))


def lr_for_epoch(epoch: int, sched: CosineRestartSchedule, fraction: float = 0.0) -> float:
    """Global epoch to cosine lr; the cycle position resets to 0 every ``t_max`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    return cosine_restart_lr((epoch % sched.t_max) + fraction, sched)


def step_lr(epoch: int, sched: StepSchedule) -> float:
    """``base_lr * gamma ** (number of milestones <= epoch)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return sched.base_lr * sched.gamma ** bisect.bisect_right(sched.milestones, epoch)


@dataclass
class OptimizerState:
    """SGD with momentum; velocity buffers live in the wrapped torch optimizer."""

    optimizer: torch.optim.SGD

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    @property
    def momentum(self) -> float:
        return float(self.optimizer.param_groups[0]["momentum"])

    @property
    def weight_decay(self) -> float:
        return float(self.optimizer.defaults["weight_decay"])

    def params(self) -> List[torch.Tensor]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]

    def velocity(self, param: torch.Tensor) -> Optional[torch.Tensor]:
        return self.optimizer.state.get(param, {}).get("momentum_buffer")

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)


def build_optimizer(
    params: Iterable[torch.Tensor],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    exclude_norm_and_bias: bool = False,
) -> OptimizerState:
    """SGD over ``params``; with ``exclude_norm_and_bias`` 1-d tensors get no weight decay."""
    trainable = [p for p in params if p.requires_grad]
    if exclude_norm_and_bias:
        groups = [
            {"params": [p for p in trainable if p.ndim > 1]},
            {"params": [p for p in trainable if p.ndim <= 1], "weight_decay": 0.0},
        ]
        groups = [g for g in groups if g["params"]]
        optimizer = torch.optim.SGD(groups, lr=lr, momentum=momentum, weight_decay=weight_decay)
    else:
        optimizer = torch.optim.SGD(trainable, lr=lr, momentum=momentum, weight_decay=weight_decay)
    return OptimizerState(optimizer)


def sgd_step(state: OptimizerState, lr: Optional[float] = None) -> OptimizerState:
    """``g = grad + wd * p; v = momentum * v + g; p -= lr * v`` for every parameter with a gradient."""
    for param in state.params():
        if param.grad is not None and param.grad.shape != param.shape:
            raise ShapeMismatchError(
                f"gradient shape {tuple(param.grad.shape)} != parameter shape {tuple(param.shape)}", "grad"
            )
    if lr is not None:
        state.set_lr(lr)
    state.optimizer.step()
    return state
