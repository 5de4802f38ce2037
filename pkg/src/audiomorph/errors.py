"""Exception hierarchy shared across the package."""


class AudiomorphError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(AudiomorphError):
    """Input data violates a precondition (non-finite, too short, bad range)."""


class ShapeError(AudiomorphError):
    """Operand shapes are incompatible for the requested operation."""


class FormatError(AudiomorphError):
    """A file does not conform to one of the binary container formats."""


class GradientError(AudiomorphError):
    """Backward pass misuse: missing gradients or a non-scalar loss."""


class UnseenStyleError(AudiomorphError):
    """A style id outside the vocabulary the checkpoint was trained with."""


class TrainingDivergedError(AudiomorphError):
    """Loss became non-finite; training aborted with the last good checkpoint."""
