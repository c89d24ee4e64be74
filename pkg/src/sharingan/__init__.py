"""Gaze following with person gaze tokens in a ViT encoder, on a NumPy autodiff core."""

from .config import TrainConfig, desk_config, load_config, parse_config
from .model import ModelConfig, Sharingan
from .tensor import Tensor

__all__ = ["ModelConfig", "Sharingan", "Tensor", "TrainConfig", "desk_config", "load_config", "parse_config"]
__version__ = "0.1.0"
