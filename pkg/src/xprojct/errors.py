"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when it escapes.
"""
from __future__ import annotations


class XprojError(Exception):
    exit_code = 1


class PreconditionError(XprojError, ValueError):
    exit_code = 3


class ConfigError(XprojError, ValueError):
    exit_code = 3


class NiftiParseError(XprojError):
    exit_code = 4


class UnsupportedFormatError(NiftiParseError):
    pass


class DimensionalityError(NiftiParseError):
    pass


class LabelParseError(XprojError):
    exit_code = 4


class VocabularyError(LabelParseError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class OrientationError(XprojError):
    exit_code = 4


class ResourceLimitError(XprojError):
    exit_code = 5


class TrainingError(XprojError):
    exit_code = 6

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class UndefinedTestError(XprojError, ValueError):
    """Statistical test cannot be computed for the given data."""

    exit_code = 1


class StageError(XprojError):
    """A preprocessing stage failed; wraps the original cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
