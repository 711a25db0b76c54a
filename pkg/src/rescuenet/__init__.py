"""Joint building segmentation and damage classification from pre/post image pairs."""

from .model import ForwardOutputs, ModelConfig, ModelParams, build_model, forward_pair, predict_masks
from .tensor import Tape, Tensor, backward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ForwardOutputs",
    "ModelConfig",
    "ModelParams",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_model",
    "forward_pair",
    "load_checkpoint",
    "predict_masks",
    "save_checkpoint",
    "train",
]
