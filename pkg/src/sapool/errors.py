"""Exception hierarchy.

Every error carries a ``category`` string; the CLI prints it as the first
token of its one-line error report so callers can dispatch on it.
"""


class SapoolError(Exception):
    category = "error"


class ConfigError(SapoolError, ValueError):
    category = "config"


class FormatError(SapoolError, ValueError):
    category = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(SapoolError, ValueError):
    category = "dimension"


class ScheduleError(SapoolError, ValueError):
    category = "schedule"


class NumericError(SapoolError, FloatingPointError):
    category = "numeric"


class ContractError(SapoolError, ValueError):
    """Violated precondition that is not a shape problem."""

    category = "contract"
