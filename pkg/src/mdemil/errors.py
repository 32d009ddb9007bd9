"""Exception types raised across the package."""


class MDEError(Exception):
    """Base class for all package errors."""


class DimensionError(MDEError, ValueError):
    pass


class DegenerateInputError(MDEError, ValueError):
    """Input is well-formed but mathematically unusable (zero rows, empty bags, ...)."""


class SpecError(MDEError, ValueError):
    """Invalid dataset, sampler or training configuration."""


class BagFormatError(MDEError, ValueError):
    pass


class BadMagicError(BagFormatError):
    pass


class VersionMismatchError(BagFormatError):
    pass


class TruncatedPayloadError(BagFormatError):
    pass


class NonFiniteValueError(BagFormatError):
    pass


class NumericalError(MDEError, ArithmeticError):
    """A loss or gradient became non-finite during training."""
