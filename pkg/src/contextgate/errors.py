"""
Exception hierarchy for contextgate.

Every error subclasses a builtin as well, so callers that already catch ``ValueError`` or
``OSError`` keep working.
"""

from typing import Optional


class ContextGateError(Exception):
    """Root of all contextgate errors."""


class DimensionError(ContextGateError, ValueError):
    """An operand has the wrong shape along a named axis."""

    def __init__(self, op: str, axis: str, expected: object, found: object):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.found = found
        super().__init__(
            f"{op}: dimension mismatch on axis '{axis}': expected {expected}, found {found}"
        )


class ContractError(ContextGateError, ValueError):
    """A documented precondition of an operation does not hold."""


class ConfigurationError(ContextGateError, ValueError):
    """Invalid configuration, unknown enum value or unusable dataset."""


class DataError(ContextGateError, OSError):
    """An image or manifest cannot be read or is malformed."""


class CheckpointError(ContextGateError, OSError):
    """A checkpoint file is missing, truncated or corrupt."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written by an incompatible format version."""

    def __init__(self, found: int, expected: int, offset: Optional[int] = None):
        self.found = found
        self.expected = expected
        super().__init__(
            f"Unsupported checkpoint format version {found}, expected {expected}", offset
        )


class NumericalError(ContextGateError, ArithmeticError):
    """A gradient or loss became NaN/Inf during training."""

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(message)
