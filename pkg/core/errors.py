"""
Exception hierarchy shared by every iGraph module.

Each error subclasses the closest builtin as well, so callers that only know
about ValueError / IndexError / KeyError keep working.
"""
from typing import Optional


class IGraphError(Exception):
    """Base class for all errors raised by the engine."""


class DimensionError(IGraphError, ValueError):
    """Operand shapes do not agree."""


class RankError(DimensionError):
    """Operand has the wrong number of axes."""


class ContractError(IGraphError, ValueError):
    """A documented precondition of an operation was violated."""


class StructureError(IGraphError, ValueError):
    """Factor graph is cyclic or has dangling variables."""


class ConfigError(IGraphError, ValueError):
    """Hyper-parameter or run configuration is out of range."""


class CapacityError(IGraphError, ValueError):
    """Exhaustive enumeration would exceed the allowed state count."""


class CheckpointError(IGraphError, ValueError):
    """Checkpoint document cannot be read or does not match its hyper-parameters."""


class IndexOutOfRange(IGraphError, IndexError):
    """Row, id or evidence value outside its valid range."""


class UnknownNameError(IGraphError, KeyError):
    """Variable, parameter or external id that does not exist."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class _LineError(IGraphError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(_LineError):
    """Input file line could not be parsed."""


class DataValidationError(_LineError):
    """Input parsed but violates a data invariant (e.g. rating out of range)."""
