"""Exception types shared across the package."""


class InputError(ValueError):
    """Caller-supplied arguments violate a documented precondition."""


class ParseError(InputError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class RangeError(InputError):
    """A time lookup fell outside the representable range (no extrapolation)."""


class DivergenceError(ArithmeticError):
    """The numerical state became non-finite; names where it happened."""
