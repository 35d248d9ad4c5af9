"""Exception types raised across the package."""


class CoaltaskError(Exception):
    """Base class for errors raised by this package."""


class InvalidArgumentError(CoaltaskError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateMessageError(CoaltaskError):
    """A belief-propagation step hit a singular (zero) combined variance."""


class OptimizationError(CoaltaskError):
    """An iterative optimizer diverged or produced non-finite values."""


class DataFormatError(CoaltaskError, ValueError):
    """A dataset file could not be parsed.

    Carries the offending path and 1-based line number when known.
    """

    def __init__(self, message, path=None, line=None):
        if path is not None:
            loc = f"{path}:{line}" if line is not None else str(path)
            message = f"{loc}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class UndefinedMetricError(CoaltaskError):
    """A metric is undefined for the given inputs (e.g. AUC with one class)."""


class UnknownMethodError(CoaltaskError, ValueError):
    """An experiment config names a method this harness does not provide."""
