"""Exception hierarchy for the unlearning toolkit."""

from typing import Optional


class UcanError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(UcanError, ValueError):
    """Invalid or missing configuration value."""

    exit_code = 2

    def __init__(self, field: str, message: str) -> None:
        """Create a configuration error.

        Args:
            field: Name of the offending configuration field.
            message: Human-readable description of the problem.
        """
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(UcanError):
    """Problem with an interaction log, manifest or other input file."""

    exit_code = 3


class ParseError(DataError):
    """Malformed row in a line-oriented input file."""

    def __init__(self, path: str, line: int, message: str) -> None:
        """Create a parse error.

        Args:
            path: File being parsed.
            line: 1-based line number of the bad row.
            message: What was wrong with the row.
        """
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class EmptyLogError(DataError):
    """An interaction log (or one side of a split) has no events."""


class CheckpointError(DataError):
    """Unreadable, truncated, mis-versioned or mismatched checkpoint."""


class DimensionError(UcanError, ValueError):
    """Tensor shapes do not line up."""

    exit_code = 3

    def __init__(self, what: str, expected: object, got: object) -> None:
        """Create a dimension error.

        Args:
            what: Name of the tensor or axis being checked.
            expected: Expected size or shape.
            got: Actual size or shape.
        """
        super().__init__(f"{what}: expected {expected}, got {got}")


class InputError(UcanError, ValueError):
    """Invalid model input such as an out-of-range token id."""

    exit_code = 3


class ContractError(UcanError, ValueError):
    """Precondition of a numeric operation was violated."""

    exit_code = 4


class NumericError(UcanError, ArithmeticError):
    """NaN or infinite values, or an undefined metric."""

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[dict] = None) -> None:
        """Create a numeric error.

        Args:
            message: Description of the failure.
            diagnostics: Optional values captured at the point of failure.
        """
        if diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)
        self.diagnostics = diagnostics or {}
