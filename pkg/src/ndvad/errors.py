"""Exception hierarchy shared by every ndvad module.

Each class carries the CLI exit code it maps to.
"""


class NDVADError(Exception):
    exit_code = 1


class ConfigError(NDVADError, ValueError):
    exit_code = 2


class DimensionError(NDVADError, ValueError):
    exit_code = 2


class DataError(NDVADError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Corrupt or truncated on-disk container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StageError(DataError):
    pass


class EvaluationError(NDVADError, ValueError):
    exit_code = 3


class NumericError(NDVADError, ArithmeticError):
    exit_code = 4


class ContractError(NDVADError, ValueError):
    exit_code = 4
