"""Exception types raised across the package."""


class PixelTextError(Exception):
    """Base class for every error raised by pixeltext."""


class RenderOverflow(PixelTextError):
    pass


class ShapeError(PixelTextError, ValueError):
    pass


class CorruptShard(PixelTextError):
    pass


class CorruptCheckpoint(PixelTextError):
    pass


class EmptyCorpus(PixelTextError, ValueError):
    pass


class UnknownId(PixelTextError, ValueError):
    pass


class OddHeadDim(PixelTextError, ValueError):
    pass


class LengthError(PixelTextError, ValueError):
    pass


class NonFiniteGradient(PixelTextError, FloatingPointError):
    pass


class MissingModality(PixelTextError):
    pass


class AllZeroRatio(PixelTextError, ValueError):
    pass


class EmptySequence(PixelTextError, ValueError):
    pass


class ConfigMismatch(PixelTextError):
    pass


class LengthMismatch(PixelTextError, ValueError):
    pass


class DegenerateInput(PixelTextError, UserWarning):
    """MCC or Spearman is undefined for the given input."""
