class JadError(Exception):
    """Base class for all errors raised by jadnet."""


class DimensionError(JadError, ValueError):
    pass


class ParameterError(JadError, ValueError):
    pass


class FormatError(JadError, ValueError):
    pass


class NumericError(JadError, ArithmeticError):
    pass


class SingularWeightError(NumericError):
    """A regularized layer has sigma_min == 0, so log(sigma_min) is undefined."""

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class UnsupportedLossError(JadError, ValueError):
    pass


class ConfigError(JadError, ValueError):
    pass
