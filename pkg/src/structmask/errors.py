"""Exception types shared across the package."""


class StructmaskError(Exception):
    """Base class for all errors raised by structmask."""


class DimensionError(StructmaskError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(StructmaskError, ValueError):
    """A scalar parameter is outside its admissible range."""


class StructureError(StructmaskError, ValueError):
    """A partition, grouping or mask violates its structural invariants."""


class NonFiniteError(StructmaskError, FloatingPointError):
    """A computation produced NaN or Inf."""


class DivergenceError(NonFiniteError):
    """An iterative solver produced a non-finite iterate."""


class TrainingError(StructmaskError, RuntimeError):
    """Training cannot continue (e.g. non-finite gradients)."""


class ConfigError(StructmaskError, ValueError):
    """An experiment configuration is invalid."""


class FormatError(StructmaskError, ValueError):
    """A file does not follow the expected binary layout."""


class MetricError(StructmaskError, ValueError):
    """A metric is undefined for the given inputs."""
