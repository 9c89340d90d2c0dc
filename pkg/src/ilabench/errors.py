"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit 2,
data/format problems exit 3, numeric failures exit 4.
"""


class IlaBenchError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ConfigError(IlaBenchError, ValueError):
    exit_code = 2


class DimensionError(IlaBenchError, ValueError):
    exit_code = 2


class EndpointError(ConfigError, IndexError):
    pass


class UsageError(IlaBenchError, RuntimeError):
    exit_code = 2


class FrozenModelError(UsageError):
    pass


class InputError(IlaBenchError, ValueError):
    exit_code = 3


class FormatError(IlaBenchError, ValueError):
    """Malformed model, dataset or batch file.

    ``offset`` is the byte position where parsing stopped, when known.
    """

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(IlaBenchError, ArithmeticError):
    exit_code = 4


class DegenerateError(NumericError):
    """A direction or reference delta has zero norm."""


class SelectionError(IlaBenchError, ValueError):
    exit_code = 2
