"""
Latent space encoding services package
"""

from .base import BaseService
from .exceptions import LseError, MatrixFormatError, NumericalError, ValidationError
from .datasets import DatasetService
from .latent import TrainingService
from .inference import FusionWeights, PredictionService
from .experiments import EvaluationService
from .synthetic import SyntheticService

__all__ = [
    'BaseService',
    'LseError',
    'MatrixFormatError',
    'NumericalError',
    'ValidationError',
    'DatasetService',
    'TrainingService',
    'FusionWeights',
    'PredictionService',
    'EvaluationService',
    'SyntheticService'
]
