"""Exception types shared across the package."""


class CMNetError(Exception):
    """Base class for every error raised by cmnet."""


class ShapeError(CMNetError, ValueError):
    pass


class NumericError(CMNetError, ArithmeticError):
    pass


class UsageError(CMNetError):
    pass


class ValidationError(CMNetError, ValueError):
    pass


class FormatError(CMNetError, ValueError):
    pass


class StateError(CMNetError):
    pass
