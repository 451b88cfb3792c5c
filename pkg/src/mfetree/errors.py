"""Exception hierarchy shared by every module."""


class MFEError(Exception):
    """Base class for all package errors."""


class InvalidParams(MFEError, ValueError):
    pass


class ProbabilityLeak(MFEError, ValueError):
    """Forward probability mass drifted away from 1."""


class IndexOutOfRange(MFEError, IndexError):
    pass


class ConfigError(MFEError, ValueError):
    """Problem in a configuration document. Carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SchemaError(ConfigError):
    """Unknown or missing field."""


class InvariantError(ConfigError):
    """Field present but its value breaks a model invariant."""


class SingularMatrix(MFEError, ArithmeticError):
    pass


class HigherOrderPole(MFEError):
    """The resolvent has a pole of order two or more."""


class NotSingular(MFEError):
    pass


class RegimeError(MFEError):
    """The interaction matrix falls in a regime the requested solver cannot handle."""

    def __init__(self, message: str, kernel_dim: int | None = None):
        self.kernel_dim = kernel_dim
        super().__init__(message)


class DegeneracyError(MFEError):
    pass


class ProbabilityBound(MFEError, ValueError):
    """A transition probability reached 0 or 1."""


class PathModeCapExceeded(MFEError, ValueError):
    pass


class InvalidPath(MFEError, ValueError):
    pass


class SimplePoleRequired(MFEError):
    pass


class ExperimentError(MFEError, ValueError):
    pass
