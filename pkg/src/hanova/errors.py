class HanovaError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(HanovaError, ValueError):
    """Inputs violate a documented precondition."""


class ParseError(HanovaError, ValueError):
    """A file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(HanovaError, RuntimeError):
    """An iterative solve stopped at its sweep limit; ``value`` holds the partial result."""

    def __init__(self, message, value=None):
        self.value = value
        super().__init__(message)
