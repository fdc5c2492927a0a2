"""Meta Networks for one-shot classification on a small numpy autodiff tape."""

from .model import MetaNet, ModelConfig, VariantConfig
from .training import Trainer, evaluate

__all__ = ["MetaNet", "ModelConfig", "VariantConfig", "Trainer", "evaluate"]
__version__ = "0.1.0"
