"""Exception hierarchy shared by the library and the CLI.

Each class carries the CLI exit code it maps to.
"""


class GDAError(Exception):
    exit_code = 1


class FormatError(GDAError, ValueError):
    """A file could not be parsed under its declared format."""

    exit_code = 2


class ConfigError(GDAError, ValueError):
    exit_code = 3


class InvalidInputError(GDAError, ValueError):
    exit_code = 3


class ShapeError(GDAError, ValueError):
    exit_code = 3


class DegenerateGraphError(GDAError, ValueError):
    exit_code = 4


class NumericError(GDAError, ArithmeticError):
    exit_code = 4


class CheckpointError(GDAError, ValueError):
    exit_code = 2


class TrainingDivergence(GDAError, ArithmeticError):
    exit_code = 5

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
