"""Retinal vessel segmentation with geometry-regularized representation filters."""

from .model import ModelConfig, Params, count_params, forward, init_params
from .objective import RegWeights, backward
from .trainer import TrainConfig, generate_synthetic_dataset, train

__all__ = [
    "ModelConfig", "Params", "RegWeights", "TrainConfig",
    "backward", "count_params", "forward", "generate_synthetic_dataset",
    "init_params", "train",
]
__version__ = "0.1.0"
