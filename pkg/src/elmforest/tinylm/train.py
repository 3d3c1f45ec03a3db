"""Adam training loop over a batch stream.

The loop is deterministic given the starting checkpoint, the schedule, and
the batch iterator. Gradients are clipped to a global norm bound before the
Adam update; the learning rate for the i-th update (1-based) is the
schedule value at step i. Checkpoints can be emitted at any requested step
and are always emitted at the final step.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator

import numpy as np

from ..errors import NonFiniteLoss, StepOutOfRange
from .checkpoint import ExpertCheckpoint, LineageEntry
from .config import TrainSchedule
from .model import copy_params, global_grad_norm, loss_and_grad
from .schedule import lr_at

BRANCH_POINT_RATIO = 2.0 / 3.0


def branch_step_for(total_steps: int) -> int:
    """Step at which the mid-run branch checkpoint is taken (2/3 of the run)."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    return max(1, round(total_steps * BRANCH_POINT_RATIO))


def train(start: ExpertCheckpoint, batches: Iterator, schedule: TrainSchedule,
          checkpoint_steps: Iterable[int] = (), *, iteration: int = 0,
          domain: str = "", loss_callback=None) -> dict[int, ExpertCheckpoint]:
    """Run ``schedule.total_steps`` updates from ``start``.

    Returns checkpoints keyed by step for every requested step plus the
    final step. Each carries the start checkpoint's lineage extended by one
    entry naming this run. A non-finite loss aborts the run; the raised
    error carries the most recent requested checkpoint so callers can keep
    partial progress.
    """
    requested = set(checkpoint_steps)
    if requested and (min(requested) < 1 or max(requested) > schedule.total_steps):
        raise StepOutOfRange(
            f"checkpoint steps {sorted(requested)} outside [1, {schedule.total_steps}]")

    lineage = start.lineage + (LineageEntry(iteration=iteration, domain=domain,
                                            parent_id=start.checkpoint_id),)
    params = copy_params(start.params)
    out: dict[int, ExpertCheckpoint] = {}

    if schedule.total_steps == 0:
        out[0] = ExpertCheckpoint.create(start.config, params, 0, lineage)
        return out

    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    b1, b2, eps = schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps
    last_emitted: ExpertCheckpoint | None = None

    for step in range(1, schedule.total_steps + 1):
        inputs, targets = next(batches)
        try:
            loss, grads = loss_and_grad(start.config, params, inputs, targets)
        except NonFiniteLoss as err:
            raise NonFiniteLoss(
                f"non-finite loss at step {step} (domain {domain!r})",
                last_checkpoint=last_emitted, step=step) from err
        if loss_callback is not None:
            loss_callback(step, loss)

        gnorm = global_grad_norm(grads)
        if not np.isfinite(gnorm):
            raise NonFiniteLoss(
                f"non-finite gradient at step {step} (domain {domain!r})",
                last_checkpoint=last_emitted, step=step)
        if gnorm > schedule.grad_clip:
            factor = schedule.grad_clip / gnorm
            for g in grads.values():
                g *= factor

        lr = lr_at(step, schedule)
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for name, p in params.items():
            g = grads[name]
            m[name] = b1 * m[name] + (1.0 - b1) * g
            v[name] = b2 * v[name] + (1.0 - b2) * np.square(g)
            p -= (lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)).astype(p.dtype)

        if step in requested or step == schedule.total_steps:
            ckpt = ExpertCheckpoint.create(start.config, copy_params(params),
                                           step, lineage)
            out[step] = ckpt
            last_emitted = ckpt

    return out
