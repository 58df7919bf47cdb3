"""Exception hierarchy shared by every ambientlab module."""

from __future__ import annotations


class AmbientLabError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 2
    kind = "error"


class UsageError(AmbientLabError, ValueError):
    kind = "usage"


class InputError(AmbientLabError, ValueError):
    kind = "input"


class ExpressionSyntaxError(InputError):
    kind = "syntax"

    def __init__(self, message: str, line: int = 1, column: int = 1):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class UnknownIdentifierError(InputError):
    kind = "unknown-identifier"

    def __init__(self, name: str, line: int = 1, column: int = 1):
        super().__init__(f"unknown identifier {name!r} (line {line}, column {column})")
        self.name = name
        self.line = line
        self.column = column


class SingularInputError(AmbientLabError, ArithmeticError):
    kind = "singular-input"

    def __init__(self, message: str, condition: float | None = None):
        super().__init__(message)
        self.condition = condition


class InsufficientOrderError(AmbientLabError):
    kind = "insufficient-order"


class CapabilityError(AmbientLabError):
    exit_code = 3
    kind = "capability"


class InternalConsistencyError(AmbientLabError):
    exit_code = 1
    kind = "internal-consistency"
