"""Exception types raised across the package."""


class ContrastiveGeometryError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(ContrastiveGeometryError, ValueError):
    pass


class DegenerateInputError(ContrastiveGeometryError, ValueError):
    pass


class InvalidParameterError(ContrastiveGeometryError, ValueError):
    pass


class InsufficientBatchError(ContrastiveGeometryError, ValueError):
    pass


class InvalidStateError(ContrastiveGeometryError, RuntimeError):
    pass


class NumericalDegeneracyError(ContrastiveGeometryError, ArithmeticError):
    pass


class DivergenceError(ContrastiveGeometryError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class UndefinedCorrelationError(ContrastiveGeometryError, ZeroDivisionError):
    pass


class SchemaError(ContrastiveGeometryError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class FormatError(ContrastiveGeometryError, ValueError):
    """Malformed DCLF dump. ``offset`` is the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateScaleWarning(UserWarning):
    """Min-max normalization saw a constant vector."""
