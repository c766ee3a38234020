"""Exception types shared across the package."""


class IbraError(Exception):
    """Base class for package errors."""


class ShapeError(IbraError, ValueError):
    pass


class NonFiniteError(IbraError, FloatingPointError):
    """A loss or gradient became NaN/inf.

    ``layer`` names the offending parameter or layer when known and
    ``report`` carries per-layer gradient magnitudes for diagnosis.
    """

    def __init__(self, message, layer=None, report=None):
        super().__init__(message)
        self.layer = layer
        self.report = report or {}


class FormatError(IbraError, ValueError):
    """Malformed IBRT container or checkpoint manifest."""


class IntegrityError(FormatError):
    """Manifest and blobs disagree, or a blob is truncated."""


class LoweringError(IbraError, ValueError):
    pass


class VerificationError(IbraError):
    pass
