"""Exception hierarchy shared by every module of the package."""


class GestureError(Exception):
    """Base class for all errors raised by gesturedim."""


class ZeroBoneLength(GestureError, ValueError):
    pass


class DimensionMismatch(GestureError, ValueError):
    pass


DimMismatch = DimensionMismatch


class ShapeMismatch(GestureError, ValueError):
    pass


class InvalidConfig(GestureError, ValueError):
    pass


ConfigInvalid = InvalidConfig


class InvalidFraction(GestureError, ValueError):
    pass


class NoForwardState(GestureError, RuntimeError):
    pass


class StepOutOfRange(GestureError, IndexError):
    pass


class NoiseAtFinalStep(GestureError, ValueError):
    pass


class NonFiniteLoss(GestureError, FloatingPointError):
    pass


class NonFiniteInput(GestureError, ValueError):
    pass


class FrameMismatch(GestureError, ValueError):
    pass


class TooFewSamples(GestureError, ValueError):
    pass


class TooShort(GestureError, ValueError):
    pass


class EmptyAudioBeats(GestureError, ValueError):
    pass


class EmptyKinematicBeats(GestureError, ValueError):
    pass


class EmptyDataset(GestureError, ValueError):
    pass


class MissingCheckpoint(GestureError, FileNotFoundError):
    pass


class FormatError(GestureError, ValueError):
    """A binary file does not match its expected layout."""
