"""Desk-scale prefix-tuning multimodal language model on a numpy autodiff core."""

from .errors import ConfigError, DataError, TransportError
from .model import ModelConfig, MultimodalModel
from .tokenizer import ByteTokenizer

__version__ = "0.1.0"

__all__ = ["ByteTokenizer", "ConfigError", "DataError", "ModelConfig", "MultimodalModel",
           "TransportError", "__version__"]
