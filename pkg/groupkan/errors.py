"""Exception hierarchy shared by every groupkan module"""


class GroupKanError(Exception):
    """Base class for all groupkan errors."""


class DimensionError(GroupKanError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(GroupKanError, ValueError):
    """A configuration value or combination of values is invalid."""


class ContractError(GroupKanError):
    """A precondition of an operation was violated by the caller."""


class DataError(GroupKanError, ValueError):
    """Input data is missing, empty or inconsistent."""


class ParseError(GroupKanError):
    """A file could not be parsed."""

    def __init__(self, message: str, offset: int = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatVersionError(GroupKanError):
    """A file was written by an incompatible format version or config."""


class UndefinedTestError(GroupKanError, ValueError):
    """A statistical test is undefined for the given input."""
