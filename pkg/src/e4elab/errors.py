"""Exception types shared across the package."""


class E4EError(Exception):
    """Base class for all package errors."""


class InvalidArgument(E4EError, ValueError):
    pass


class RangeError(E4EError, ValueError):
    """A value (usually a scene field) left its admissible range."""


class RankError(E4EError, ValueError):
    pass


class NumericError(E4EError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class TrainingError(E4EError, RuntimeError):
    pass


class ConfigError(E4EError, ValueError):
    pass
