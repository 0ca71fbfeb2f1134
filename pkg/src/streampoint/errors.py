"""Exception hierarchy shared by every streampoint module."""


class StreampointError(Exception):
    """Base class for all library errors."""


class ShapeError(StreampointError, ValueError):
    """Operands or inputs have incompatible shapes."""


class InvalidInputError(StreampointError, ValueError):
    """An input violates a documented precondition."""


class NumericFault(StreampointError, ArithmeticError):
    """A non-finite value was produced or consumed in checked mode."""


class DegenerateError(StreampointError, ValueError):
    """Geometry is degenerate (collinear points, non-pinhole raymap, ...)."""


class EmptySupervisionError(StreampointError, ValueError):
    """A loss term has nothing to supervise."""


class EmptyEvaluationError(StreampointError, ValueError):
    """A metric has no valid samples to evaluate."""


class EmptyExportError(StreampointError, ValueError):
    """No points survived the export filter."""


class FormatError(StreampointError, IOError):
    """A file on disk is malformed or truncated."""


class UnsupportedVersionError(FormatError):
    """A manifest declares a version this build does not read."""
