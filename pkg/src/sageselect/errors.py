"""Exception hierarchy shared by every module."""


class SageError(Exception):
    """Base class for all errors raised by sageselect."""


class ConfigError(SageError, ValueError):
    pass


class InputShapeError(SageError, ValueError):
    pass


class ConvergenceError(SageError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DataError(SageError, ValueError):
    pass


class FormatError(SageError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(SageError, RuntimeError):
    pass


class BudgetError(SageError, ValueError):
    pass


class StreamError(SageError, RuntimeError):
    pass


class ScaleGuardError(SageError, ValueError):
    """Oracle refused an input too large for dense D x D work."""
