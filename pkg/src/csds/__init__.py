"""Semi-supervised gland segmentation with color and structure students sharing an EMA teacher."""

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    CSDSError,
    DimensionError,
    DivergenceError,
    GenerationError,
    IncompatibleStateError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "CSDSError",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "GenerationError",
    "IncompatibleStateError",
    "NumericError",
]
