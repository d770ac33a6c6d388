"""Exception hierarchy shared by every module in the package."""


class FlareError(Exception):
    """Base class for all package errors."""


class DimensionError(FlareError, ValueError):
    """Operand shapes do not conform."""


class InvalidValueError(FlareError, ValueError):
    """NaN/Inf encountered, or a value outside an operation's domain."""


class ConfigError(FlareError, ValueError):
    """Invalid hyperparameter or configuration combination."""


class ConvergenceError(FlareError, RuntimeError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FormatError(FlareError, ValueError):
    """Base class for binary file format errors."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class TensorCountError(FormatError):
    pass
