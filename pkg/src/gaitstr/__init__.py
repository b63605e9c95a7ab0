"""Gait recognition from silhouettes and two-stream skeletons with silhouette-guided refinement."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    GaitSTRError,
    InvalidBatchError,
    InvalidInputError,
    ProtocolError,
    TrainingDivergedError,
)
from .refinement import GaitSTR, ModelConfig  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = [
    "ConfigError",
    "GaitSTR",
    "GaitSTRError",
    "InvalidBatchError",
    "InvalidInputError",
    "ModelConfig",
    "ProtocolError",
    "TrainConfig",
    "TrainingDivergedError",
    "__version__",
    "train",
]
