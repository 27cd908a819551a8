"""Early classification of multispectral time series.

An LSTM classifier with a second head that emits a per-step stopping
probability, trained with a loss that trades classification accuracy against
an earliness reward. Everything is built on a small reverse-mode autodiff
engine over numpy arrays.
"""

from .diffcore import Value, backward, check_gradients, no_grad
from .model import ModelConfig, ParameterSet, forward, init_parameters
from .earliness import LossConfig, sample_stop, sequence_loss, stopping_distribution
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Value", "backward", "check_gradients", "no_grad",
    "ModelConfig", "ParameterSet", "forward", "init_parameters",
    "LossConfig", "sample_stop", "sequence_loss", "stopping_distribution",
    "TrainConfig",
]
