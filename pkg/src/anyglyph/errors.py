"""Exception types raised across the package."""


class AnyGlyphError(Exception):
    pass


class ShapeMismatch(AnyGlyphError, ValueError):
    pass


class UnrenderableCodepoint(AnyGlyphError, ValueError):
    pass


class CanvasTooSmall(AnyGlyphError, ValueError):
    pass


class EmptyCharset(AnyGlyphError, ValueError):
    pass


class IOFailure(AnyGlyphError, OSError):
    pass


class InvalidRange(AnyGlyphError, ValueError):
    pass


class StepOutOfRange(AnyGlyphError, ValueError):
    pass


class UntrainedModel(AnyGlyphError, RuntimeError):
    pass


class EmptyPrompt(AnyGlyphError, ValueError):
    pass


class InvalidCoefficient(AnyGlyphError, ValueError):
    pass


class TooFewSamples(AnyGlyphError, ValueError):
    pass


class NonFiniteFeatures(AnyGlyphError, ValueError):
    pass


class ImageTooSmall(AnyGlyphError, ValueError):
    pass


class ManifestMismatch(AnyGlyphError, ValueError):
    pass


class CorruptCheckpoint(AnyGlyphError, ValueError):
    pass


class VersionMismatch(AnyGlyphError, ValueError):
    pass


class DatasetEmpty(AnyGlyphError, ValueError):
    pass


class NonFiniteLoss(AnyGlyphError, RuntimeError):
    """Training produced a NaN/inf loss. ``batch_ids`` and ``step`` identify the batch."""

    def __init__(self, message, step=None, batch_ids=None):
        super().__init__(message)
        self.step = step
        self.batch_ids = list(batch_ids or [])
