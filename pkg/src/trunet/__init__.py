"""TRU-NET and HCGRU rainfall downscaling models on a small numpy autodiff engine."""

from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    DataError,
    FormatError,
    GradientCheckError,
    PlacementError,
    ShapeError,
    TrainingDiverged,
)
from .tensor import GradientTape, Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "CorruptionError",
    "DataError",
    "FormatError",
    "GradientCheckError",
    "GradientTape",
    "Parameter",
    "PlacementError",
    "ShapeError",
    "Tensor",
    "TrainingDiverged",
    "backward",
    "no_grad",
]
