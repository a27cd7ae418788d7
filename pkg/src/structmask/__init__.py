"""Learning structured binary measurement masks through unrolled sparse-recovery solvers."""
from .errors import (ConfigError, DimensionError, DivergenceError, FormatError, MetricError, NonFiniteError,
                     ParameterError, StructmaskError, StructureError, TrainingError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "DivergenceError", "FormatError", "MetricError", "NonFiniteError",
           "ParameterError", "StructmaskError", "StructureError", "TrainingError", "__version__"]
