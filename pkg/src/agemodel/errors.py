"""Exception hierarchy shared across the package."""


class AgeModelError(Exception):
    """Base class for all package errors."""


class DataError(AgeModelError):
    """Input data is malformed or inconsistent."""


class GridMismatchError(DataError):
    """Two volumes or fields do not live on the same grid."""


class InvalidFieldError(DataError):
    """A field or volume contains non-finite values or has the wrong shape."""


class VolumeFormatError(DataError):
    """A volume header or payload could not be parsed."""


class ModelFormatError(DataError):
    """A saved model directory is incomplete or has an unsupported version."""


class NumericalError(AgeModelError):
    """A numerical procedure could not produce a usable result."""


class NoGradientError(NumericalError):
    """An image has no intensity gradient to drive registration."""


class StageError(AgeModelError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the reason."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
