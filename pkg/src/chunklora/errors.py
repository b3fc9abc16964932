"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
input/file-format problems exit 3, and runtime policy violations exit 4.
"""


class ChunkLoraError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ChunkLoraError):
    """Matrix or vector dimensions do not line up."""


class DomainError(ChunkLoraError):
    """Input values outside the operation's domain (non-finite, malformed)."""


class RangeError(ChunkLoraError):
    """An index or rank parameter outside its valid range."""


class ConvergenceError(ChunkLoraError):
    """Iterative factorization failed to converge within its sweep cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConfigError(ChunkLoraError):
    """Invalid configuration value or combination. Exit code 2."""


class CalibrationError(ConfigError):
    """Calibration input does not support the requested statistics."""


class FormatError(ChunkLoraError):
    """Malformed input file (bad magic, version, or payload). Exit code 3."""


class PolicyError(ChunkLoraError):
    """A policy asked for something the current state cannot satisfy. Exit code 4."""


class CapacityError(ChunkLoraError):
    """A fixed capacity (e.g. maximum sequence length) was exceeded. Exit code 4."""


class StateError(ChunkLoraError):
    """Operation invalid in the current object state. Exit code 4."""
