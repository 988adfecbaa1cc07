"""Exception hierarchy shared by every cicreg module."""

from typing import Optional


class CicregError(Exception):
    """Base class for all cicreg errors."""


class InvalidInputError(CicregError, ValueError):
    """An operation was called outside its preconditions."""


class ConfigError(CicregError, ValueError):
    """A configuration key or value could not be accepted."""


class UndefinedMetricError(CicregError, ArithmeticError):
    """A metric has no defined value for the given inputs."""


class FormatError(CicregError, ValueError):
    """
    A file could not be decoded.

    Attributes:
        path (str): File that failed to decode.
        offset (int, optional): Byte offset of the problem, when known.
    """

    def __init__(self, message: str, path: str = "", offset: Optional[int] = None):
        self.path = str(path)
        self.offset = offset
        location = f" at byte {offset}" if offset is not None else ""
        prefix = f"{self.path}: " if self.path else ""
        super().__init__(f"{prefix}{message}{location}")
