"""Exception types shared across the package.

Every error raised on a contract violation derives from HistnError so
callers (and the CLI) can separate package failures from programming
mistakes in the surrounding code.
"""


class HistnError(Exception):
    """Base class for all package-level errors."""


class DimensionError(HistnError):
    """Shapes do not line up for the requested operation."""


class ParameterError(HistnError):
    """An argument value is outside its allowed range."""


class ContractError(HistnError):
    """A structural precondition was violated (lengths, emptiness, scalarity)."""


class NumericError(HistnError):
    """NaN/Inf appeared, or an iterative routine failed to converge."""


class LabelError(HistnError):
    """A class label lies outside the configured 1..K range."""


class ValidationError(HistnError):
    """A config, graph spec, or manifest failed validation."""


class DataError(HistnError):
    """A dataset file could not be loaded or is internally inconsistent."""


class ProtocolError(HistnError):
    """An experimental protocol precondition does not hold."""


class MetricError(HistnError):
    """A metric is undefined for the given inputs (empty or degenerate)."""
