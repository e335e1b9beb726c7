"""Exception types shared across the package."""


class HseError(Exception):
    """Base class for all package errors."""


class DimensionError(HseError, ValueError):
    pass


class ConfigError(HseError, ValueError):
    pass


class FormatError(HseError):
    """Malformed input file or directory."""


class SamplingError(HseError):
    pass


class EvaluationError(HseError, ArithmeticError):
    """A function produced non-finite values where finite ones were required."""


class DivergenceError(HseError, ArithmeticError):
    pass


class LookupFailure(HseError, KeyError):
    pass
