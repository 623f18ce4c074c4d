"""Exception hierarchy shared by every module."""


class GFSSError(Exception):
    pass


class ConfigurationError(GFSSError, ValueError):
    pass


class DataError(GFSSError, ValueError):
    pass


class ShapeError(GFSSError, ValueError):
    pass


class InvariantError(GFSSError, ValueError):
    """A domain invariant (e.g. non-zero prototype norm) does not hold."""


class LineageError(GFSSError):
    """A checkpoint is used in the wrong phase or with the wrong taxonomy."""


class CheckpointError(GFSSError):
    pass


class TrainingDivergenceError(GFSSError, FloatingPointError):
    """Raised on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DegenerateColumnWarning(UserWarning):
    """A classifier column has (near) zero spread and was not calibrated."""


class CutoutFallbackWarning(UserWarning):
    """No eligible pixel for the requested cutout mode; icutout was used."""
