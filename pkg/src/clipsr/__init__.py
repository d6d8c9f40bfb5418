"""Text-guided image super-resolution on a small numpy autodiff engine."""

from .errors import (
    ChecksumError,
    ConfigurationError,
    ContractError,
    DimensionError,
    InputError,
    ValidationError,
)
from .tensor import Tensor, backward, default_dtype, no_grad

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "InputError",
    "Tensor",
    "ValidationError",
    "backward",
    "default_dtype",
    "no_grad",
]
