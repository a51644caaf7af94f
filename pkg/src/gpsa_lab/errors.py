"""Exception types shared across the package."""


class GpsaError(Exception):
    """Base class for every error raised by gpsa_lab."""


class ShapeError(GpsaError, ValueError):
    pass


class NumericError(GpsaError, ArithmeticError):
    """A computation produced (or was fed) NaN/Inf."""


class ContractError(GpsaError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(GpsaError, ValueError):
    pass


class FormatError(GpsaError, ValueError):
    """A file on disk does not match the expected binary layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
