"""Subject-prioritized temporal action localization at desk scale."""

from .autograd import Parameter, Tensor, grad_check
from .model import ModelConfig, SubjectPriorDetector, prepare_sample
from .training import TrainConfig, fit

__all__ = [
    "Parameter", "Tensor", "grad_check",
    "ModelConfig", "SubjectPriorDetector", "prepare_sample",
    "TrainConfig", "fit",
]
