"""EMA coupling between student and teacher, and the momentum schedule."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch

from .errors import ShapeError
from .model import ModelPair

logger = logging.getLogger(__name__)


class MomentumSchedule(str, Enum):
    CONSTANT = "constant"
    COSINE_TO_ONE = "cosine_to_one"


@dataclass
class EmaConfig:
    m0: float = 0.99
    schedule: MomentumSchedule = MomentumSchedule.CONSTANT
    total_steps: Optional[int] = None

    def violations(self):
        found = []
        if not 0 <= self.m0 <= 1:
            found.append(f"ema.m0 must be in [0, 1], got {self.m0}")
        if self.schedule == MomentumSchedule.COSINE_TO_ONE and self.total_steps is not None and self.total_steps <= 0:
            found.append(f"ema.total_steps must be positive for a cosine schedule, got {self.total_steps}")
        return found


@torch.no_grad()
def ema_update(pair: ModelPair, m: float):
    """theta_t <- m * theta_t + (1 - m) * theta_s for weights and BN statistics of backbone and projector."""
    if not 0 <= m <= 1:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    for student, teacher in pair.coupled_modules():
        s_params = list(student.parameters())
        t_params = list(teacher.parameters())
        s_buffers = list(student.buffers())
        t_buffers = list(teacher.buffers())
        if len(s_params) != len(t_params) or len(s_buffers) != len(t_buffers):
            raise ShapeError("student and teacher have different parameter layouts")
        for s, t in zip(s_params + s_buffers, t_params + t_buffers):
            if s.shape != t.shape:
                raise ShapeError(f"EMA shape mismatch: student {tuple(s.shape)} vs teacher {tuple(t.shape)}")
            if m == 1.0:
                continue
            if not t.is_floating_point():
                # integer counters (num_batches_tracked) follow the student
                t.copy_(s)
            elif m == 0.0:
                t.copy_(s)
            else:
                t.mul_(m).add_(s.detach(), alpha=1.0 - m)


def momentum_schedule(step: int, cfg: EmaConfig) -> float:
    """Constant m0, or cosine ramp 1 - (1 - m0) * (cos(pi * step / T) + 1) / 2."""
    if cfg.schedule == MomentumSchedule.CONSTANT:
        return cfg.m0
    total = cfg.total_steps
    if not total or total <= 0:
        raise ValueError("cosine momentum schedule needs total_steps > 0")
    if step < 0 or step > total:
        clamped = min(max(step, 0), total)
        logger.warning(f"Momentum schedule step {step} outside [0, {total}], clamped to {clamped}")
        step = clamped
    return 1.0 - (1.0 - cfg.m0) * (math.cos(math.pi * step / total) + 1.0) / 2.0
