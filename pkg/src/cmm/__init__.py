"""Contraction-mapping recursive reasoning on a small numpy autodiff core."""

from .config import CmmConfig, ConfigError
from .net import Model, ModelParams
from .train import Trainer, evaluate

__version__ = "0.1.0"

__all__ = ["CmmConfig", "ConfigError", "Model", "ModelParams", "Trainer", "evaluate", "__version__"]
