"""Exception types raised across the package."""


class CTPError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(CTPError, ValueError):
    """Input has no well-defined result (zero-norm vector, empty point set)."""


class ShapeError(CTPError, ValueError):
    """Array shapes or batch sizes disagree."""


class UnsupportedModalityCount(CTPError, ValueError):
    """Only three modalities are supported by the similarity tensor."""


class ManifestError(CTPError, ValueError):
    """A manifest or checkpoint file could not be parsed."""


class NonFiniteLossError(CTPError, FloatingPointError):
    """Training produced a NaN or infinite loss."""


class GradCheckFailure(CTPError, AssertionError):
    """A gradient or oracle check exceeded its tolerance."""
