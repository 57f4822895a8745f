"""Exception hierarchy shared by the whole package."""


class HandSplatError(Exception):
    """Base class; the CLI maps every subclass to exit code 2."""


class NonPositiveDepth(HandSplatError):
    pass


class DimensionMismatch(HandSplatError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class StateMismatch(HandSplatError):
    """Backward pass requested without the forward buffers it needs."""


class EmptySet(HandSplatError, ValueError):
    pass


class EmptyCloud(EmptySet):
    pass


class MissingAgent(HandSplatError, KeyError):
    pass


class FrameCountMismatch(DimensionMismatch):
    pass


class NonFiniteGradient(HandSplatError, FloatingPointError):
    pass


class NonFiniteLoss(HandSplatError, FloatingPointError):
    pass


class NonFiniteSplat(HandSplatError, FloatingPointError):
    pass


class OutOfRange(HandSplatError, ValueError):
    pass


class ParseError(HandSplatError, ValueError):
    pass


class MissingFile(HandSplatError, FileNotFoundError):
    pass
