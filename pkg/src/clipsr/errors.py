"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Parameters cannot produce a well-formed result (bad scale, size, stride...)."""


class ContractError(RuntimeError):
    """A calling contract was violated (e.g. backward on a non-scalar)."""


class InputError(ValueError):
    """Caller-supplied data is empty or otherwise unusable."""


class ValidationError(ValueError):
    """A config or checkpoint failed validation before any work started."""


class ChecksumError(ValueError):
    """A checkpoint payload does not match its recorded digest."""
