"""Binary neural networks with shifted sign thresholds, in plain numpy."""
from . import binkernel, data, exper, models, nn, optim, tensor
from .exper import ExperimentConfig, RunRecord
from .models import Model, ModelSpec, build

__version__ = "0.1.0"

__all__ = ["binkernel", "data", "exper", "models", "nn", "optim", "tensor", "ExperimentConfig", "RunRecord",
           "Model", "ModelSpec", "build"]
