"""Exception hierarchy shared by every module."""


class RmtlError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RmtlError, ValueError):
    pass


class ShapeError(RmtlError, ValueError):
    pass


class NumericError(RmtlError, ArithmeticError):
    pass


class ParseError(RmtlError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaMismatchError(ValidationError):
    pass


class StateError(RmtlError, RuntimeError):
    pass


class DivergenceError(RmtlError, RuntimeError):
    pass


class CheckpointError(RmtlError, IOError):
    pass


class UndefinedMetricError(RmtlError, ValueError):
    pass
