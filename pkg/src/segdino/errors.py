"""Exception hierarchy shared by every module."""


class SegDinoError(Exception):
    """Base class for all package errors."""


class ShapeError(SegDinoError, ValueError):
    """Array extents are inconsistent with an operation's contract."""


# matmul and friends report "dimension" problems; same thing.
DimensionError = ShapeError


class ParameterError(SegDinoError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class NumericError(SegDinoError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class DataError(SegDinoError, ValueError):
    """Bad sample contents, e.g. a label outside [0, n_class)."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DomainError(SegDinoError, ValueError):
    """Input values outside the mathematical domain of a metric."""


class FormatError(SegDinoError, ValueError):
    """Malformed file contents."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(SegDinoError, ValueError):
    """Run configuration violates one or more invariants.

    ``violations`` holds one human-readable line per broken rule.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))


class CheckpointError(SegDinoError, ValueError):
    """A checkpoint could not be read or does not match the configuration."""
