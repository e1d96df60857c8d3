class Cp3Error(Exception):
    """Base class for all package errors."""


class ValidationError(Cp3Error, ValueError):
    """Bad user input: malformed files, invalid configs, out-of-range arguments."""


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInputError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    pass


class BoundsError(ValidationError, IndexError):
    pass


class ShapeError(ValidationError):
    """Raised when an op receives tensors of incompatible shape."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class NonFiniteError(Cp3Error, FloatingPointError):
    """A NaN or Inf appeared in a tensor value or gradient."""
