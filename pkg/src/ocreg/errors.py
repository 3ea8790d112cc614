"""Exception hierarchy shared by the library and the CLI."""


class OCRError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(OCRError, ValueError):
    exit_code = 2


class ShapeError(OCRError, ValueError):
    exit_code = 2


class ContractError(OCRError, ValueError):
    exit_code = 2


class FormatError(OCRError, ValueError):
    """Malformed dataset or checkpoint file.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(OCRError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError):
    """Input outside the mathematical domain of an operation (e.g. log of 0)."""
