"""Two-stream two-resolution speech recognition on a numpy autograd core."""

from .config import Config, ModelConfig, SynthSpec, TrainConfig, load_config, parse_config, tiny_config
from .model import TSTRM, make_batch
from .tensor import Tensor, no_grad

__all__ = [
    "Config",
    "ModelConfig",
    "SynthSpec",
    "TrainConfig",
    "TSTRM",
    "Tensor",
    "load_config",
    "make_batch",
    "no_grad",
    "parse_config",
    "tiny_config",
]

__version__ = "0.1.0"
