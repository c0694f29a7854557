"""Exception types raised across the package."""


class MaskConError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MaskConError, ValueError):
    pass


class ZeroNormRow(MaskConError, ValueError):
    pass


class NotNormalized(MaskConError, ValueError):
    pass


class NonPositiveTemperature(MaskConError, ValueError):
    pass


class NonFiniteSimilarity(MaskConError, ValueError):
    pass


class BadEpoch(MaskConError, ValueError):
    pass


class LabelOutOfRange(MaskConError, ValueError):
    pass


class TooFewPoints(MaskConError, ValueError):
    pass


class BadConfig(MaskConError, ValueError):
    """Invalid generator or run configuration."""


ConfigError = BadConfig


class MalformedRecord(MaskConError, ValueError):
    pass


class IncompleteCoarseMap(MaskConError, ValueError):
    pass


class ChecksumMismatch(MaskConError, ValueError):
    pass


class DimMismatch(MaskConError, ValueError):
    pass


class NumericalError(MaskConError, ArithmeticError):
    """Non-finite loss encountered during training."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
