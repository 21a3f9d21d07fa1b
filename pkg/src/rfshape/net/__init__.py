"""Point cloud completion network: autodiff, model, training, checkpoints."""

from .autodiff import GraphCycle, Tensor, backward
from .checkpoint import (CheckpointError, load_checkpoint, save_checkpoint)
from .model import ModelConfig, forward, init_params, predicted_class
from .train import (NonFiniteLoss, TrainConfig, TrainResult, evaluate_sample,
                    infer_clouds, split_samples, train)

__all__ = [
    "GraphCycle", "Tensor", "backward",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "ModelConfig", "forward", "init_params", "predicted_class",
    "NonFiniteLoss", "TrainConfig", "TrainResult", "evaluate_sample",
    "infer_clouds", "split_samples", "train",
]
