"""Exception hierarchy shared by every module in the package."""


class StressError(Exception):
    """Base class for all package errors."""


class SchemaError(StressError, ValueError):
    pass


class EmptyStreamError(StressError, ValueError):
    pass


class ManifestError(StressError, ValueError):
    pass


class ConfigError(StressError, ValueError):
    pass


class InsufficientDataError(StressError, ValueError):
    pass


class ShapeError(StressError, ValueError):
    pass


class ZeroVarianceError(StressError, ArithmeticError):
    """Raised instead of reporting p = 0 for a sample without spread."""


class DegenerateDataError(StressError, ValueError):
    pass


class NonFiniteGradientError(StressError, FloatingPointError):
    pass
