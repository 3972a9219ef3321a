"""Exception types raised across the package."""


class OcnoptError(Exception):
    """Base class for all library errors."""


class DimensionError(OcnoptError, ValueError):
    pass


class ConvergenceError(OcnoptError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotPSDError(OcnoptError, ValueError):
    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class IndefiniteError(NotPSDError):
    pass


class FactorizationError(OcnoptError):
    pass


class DivergedError(OcnoptError, FloatingPointError):
    """A forward/backward pass produced non-finite values."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class CurvatureError(DivergedError):
    pass


class ParseError(OcnoptError, ValueError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class ConfigError(OcnoptError, ValueError):
    pass
