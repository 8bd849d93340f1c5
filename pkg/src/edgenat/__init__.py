"""EdgeNAT: edge detection with a dilated neighborhood attention transformer, on a numpy autodiff core."""

from .config import EvalConfig, ModelConfig, RunConfig, TrainConfig, load_run_config, tiny_config, variant
from .model import EdgeNAT, EdgePrediction
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "EdgeNAT",
    "EdgePrediction",
    "EvalConfig",
    "ModelConfig",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "load_run_config",
    "tiny_config",
    "variant",
]
