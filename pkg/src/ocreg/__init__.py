"""Order-preserving consistency regularization on a numpy autodiff core."""

from .errors import ConfigError, ContractError, DomainError, FormatError, NumericError, OCRError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DomainError", "FormatError", "NumericError", "OCRError"]
