"""Exception types shared across modules."""


class InvalidArgument(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(ValueError):
    pass


class ChecksumMismatch(FormatError):
    pass


class NumericalFailure(ArithmeticError):
    pass


class DegenerateInput(ValueError):
    pass
