"""Warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

import math

from ..errors import StepOutOfRange
from .config import TrainSchedule


def lr_at(step: int, schedule: TrainSchedule) -> float:
    """Learning rate for optimizer step ``step``.

    Linear ramp from 0 at step 0 to ``max_lr`` at ``warmup_steps``, then a
    cosine anneal reaching exactly ``min_lr`` at ``total_steps``. Update
    ``i`` (1-based) of a training run uses ``lr_at(i)``.
    """
    if step < 0 or step > schedule.total_steps:
        raise StepOutOfRange(
            f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.max_lr
        return schedule.max_lr * (step / schedule.warmup_steps)
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    return schedule.min_lr + 0.5 * (schedule.max_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * progress))
