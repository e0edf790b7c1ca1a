"""Unsupervised anomaly segmentation with autoencoders, on synthetic phantoms."""

from .errors import (AesegError, ConfigError, ContractError, DimensionError, FormatError, NumericalError,
                     ParameterError)
from .models import ModelKind, build_model, reconstruct
from .pipeline import PipelineConfig, fit_threshold, segment
from .training import TrainConfig, train

__version__ = "0.1.0"
