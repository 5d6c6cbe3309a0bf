class DenserNetError(Exception):
    """Base class for all package errors."""


class ConfigError(DenserNetError, ValueError):
    pass


class ShapeError(DenserNetError, ValueError):
    pass


class ValidationError(DenserNetError, ValueError):
    pass


class FormatError(DenserNetError, ValueError):
    """Raised when a checkpoint or feature record cannot be decoded."""


class NumericalError(DenserNetError, ArithmeticError):
    pass
