"""Exception hierarchy. CLI exit codes map onto these classes."""


class IAUNetError(Exception):
    exit_code = 1


class UsageError(IAUNetError):
    """API misuse: non-scalar loss, stale tape, bad arguments."""

    exit_code = 1


class DimensionError(IAUNetError, ValueError):
    exit_code = 1


class ConfigurationError(IAUNetError, ValueError):
    exit_code = 1


class DataValidationError(IAUNetError, ValueError):
    exit_code = 2


class CheckpointError(IAUNetError):
    exit_code = 2


class NumericError(IAUNetError, ArithmeticError):
    """A NaN/Inf appeared in a forward value, gradient or optimizer update."""

    exit_code = 3
