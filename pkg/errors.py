"""Exceptions raised across the landscape-selector modules.

Every error carries the process exit code the CLI uses for it.
"""


class LandscapeError(Exception):
    exit_code = 1


class ConfigError(LandscapeError):
    exit_code = 2


class InvalidDimensionError(LandscapeError, ValueError):
    exit_code = 3


class UnknownClassError(LandscapeError, ValueError):
    exit_code = 3


class SampleSizeError(LandscapeError, ValueError):
    exit_code = 3


class DimensionMismatchError(LandscapeError, ValueError):
    exit_code = 3


class ShapeError(LandscapeError, ValueError):
    exit_code = 3


class UnknownAlgorithmError(LandscapeError, ValueError):
    exit_code = 3


class NonFiniteFitnessError(LandscapeError, ValueError):
    exit_code = 4


class BudgetError(LandscapeError, ValueError):
    exit_code = 5


class BudgetExhaustedError(LandscapeError):
    exit_code = 5


class BoundsViolationError(LandscapeError, ValueError):
    exit_code = 5


class FileFormatError(LandscapeError, ValueError):
    exit_code = 6


class EmptySplitError(LandscapeError, ValueError):
    exit_code = 7


class MissingInputError(LandscapeError, FileNotFoundError):
    exit_code = 8


class MissingMethodError(LandscapeError, KeyError):
    exit_code = 3

    def __str__(self):
        return str(self.args[0]) if self.args else ''
