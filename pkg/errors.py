"""Exception hierarchy for UberNet. Each class carries the CLI exit code it maps to."""
from typing import Optional


class UberNetError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = 1


class SchemaError(UberNetError):
    """Missing column, unknown feature, or schema/table mismatch."""
    exit_code = 2


class ConfigError(SchemaError):
    """Unknown or badly typed run configuration key."""


class ParseError(UberNetError):
    """A record in an input file could not be parsed."""
    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ''
        if path:
            where = f"{path}:"
        if line is not None:
            where = f"{where}line {line}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")


class DivergenceError(UberNetError):
    """Training loss became non-finite."""
    exit_code = 4

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class CompatibilityError(UberNetError):
    """Checkpoint does not match the panel schema or configuration."""
    exit_code = 5


class FormatError(UberNetError):
    """Truncated or malformed checkpoint / interchange file."""
    exit_code = 5


class ContractError(UberNetError, ValueError):
    """A precondition of an operation was violated."""


class SizeError(ContractError):
    pass


class RangeError(ContractError):
    pass


class PlanningError(ContractError):
    pass


class InputError(ContractError):
    pass


class NumericError(UberNetError, ArithmeticError):
    """Non-finite value or singular system."""

    def __init__(self, message: str, where: Optional[str] = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class ImputationError(UberNetError):
    """A missing cell could not be filled."""

    def __init__(self, message: str, feature: Optional[str] = None):
        self.feature = feature
        super().__init__(message)
