"""Exception hierarchy; each family maps to one CLI exit code."""


class UsageError(Exception):
    """Invalid configuration or arguments (exit code 1)."""

    exit_code = 1


class DataError(Exception):
    """Unreadable, malformed or inconsistent input data (exit code 2)."""

    exit_code = 2


class SchemaError(DataError):
    pass


class MalformedStreamError(DataError):
    pass


class NumericalError(Exception):
    """Numerical failure or design abort, e.g. common support (exit code 3)."""

    exit_code = 3


class SupportError(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass
