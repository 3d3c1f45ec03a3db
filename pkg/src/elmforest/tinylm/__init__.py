"""Tiny numpy language models: configs, training, checkpoints."""

from .checkpoint import (ExpertCheckpoint, LineageEntry, deserialize_checkpoint,
                         load_checkpoint)
from .config import ExpertConfig, TrainSchedule
from .model import (ffn_param_count, forward, init_params, layer_param_count,
                    loss_and_grad, next_token_logprobs, param_count,
                    position_logprobs, tensor_shapes)
from .schedule import lr_at
from .train import branch_step_for, train

__all__ = [
    "ExpertCheckpoint", "LineageEntry", "deserialize_checkpoint", "load_checkpoint",
    "ExpertConfig", "TrainSchedule",
    "ffn_param_count", "forward", "init_params", "layer_param_count",
    "loss_and_grad", "next_token_logprobs", "param_count", "position_logprobs",
    "tensor_shapes", "lr_at", "branch_step_for", "train",
]
