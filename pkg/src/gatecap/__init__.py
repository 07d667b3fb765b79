"""Memory-gated deep-transition RNN captioner on precomputed image features."""

from gatecap.model import FeedMode, ModelConfig, ModelParams, init_params, forward_sequence
from gatecap.optim import TrainConfig, train

__all__ = [
    "FeedMode",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "forward_sequence",
    "init_params",
    "train",
]
__version__ = "0.1.0"
