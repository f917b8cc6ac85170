"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from QuantkitError so callers can
catch toolkit failures without swallowing genuine bugs.
"""


class QuantkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QuantkitError):
    """Operand dimensions are inconsistent or unsupported."""


class ContractError(QuantkitError):
    """A precondition on an API call was violated."""


class ConfigurationError(QuantkitError):
    """User-supplied configuration is invalid or incomplete."""


class UnsupportedPatternError(QuantkitError):
    """The graph contains a structure a transform cannot handle."""


class ModelFormatError(QuantkitError):
    """A model or data file could not be parsed."""


class NumericalError(QuantkitError):
    """Training or evaluation produced non-finite or divergent values."""


class AccumulatorOverflowError(NumericalError):
    """Integer accumulation exceeded the checked accumulator width."""
