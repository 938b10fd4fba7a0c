"""EEG emotion recognition with source-to-target style transfer, built on a small numpy autodiff engine."""

from .config import ModelConfig, TrainConfig
from .tensor import Tensor, no_grad

__all__ = ["ModelConfig", "TrainConfig", "Tensor", "no_grad"]
__version__ = "0.1.0"
