"""Exception types shared across the soil segmentation pipeline."""


class SoilSegError(Exception):
    """Base class for all soilseg errors."""


# -- dataset loading / validation -------------------------------------------

class MissingFile(SoilSegError):
    """Expected dataset layout entry (annotation file, image dir, image) is absent."""


class SchemaError(SoilSegError):
    """Annotation JSON is missing a required key or a value has the wrong type."""


class DanglingReference(SoilSegError):
    """An annotation points to an image or category id that does not exist."""


class DegeneratePolygon(SoilSegError):
    """A polygon has fewer than 3 vertices (or an odd coordinate count)."""


class EmptyInput(SoilSegError):
    """An operation that requires at least one element received none."""


# -- model -------------------------------------------------------------------

class ConfigError(SoilSegError):
    """Model configuration violates its invariants."""


class WeightsUnavailable(SoilSegError):
    """Pretrained weights were requested but could not be obtained."""


class InvalidK(SoilSegError):
    """Anchor count k must be a positive integer."""


class DegenerateBox(SoilSegError):
    """A box has non-positive width or height."""


class NonFiniteLoss(SoilSegError):
    """A loss component is NaN or infinite."""


class ShapeMismatch(SoilSegError):
    """Two arrays that must share a shape do not."""


# -- training ----------------------------------------------------------------

class EpochOutOfRange(SoilSegError):
    """Epoch index outside [0, epochs)."""


class DataError(SoilSegError):
    """Dataset unusable for training (e.g. empty)."""


class CorruptCheckpoint(SoilSegError):
    """Checkpoint file is unreadable or truncated."""


class VersionMismatch(SoilSegError):
    """Checkpoint format version or model shape does not match the target."""


# -- post-processing ---------------------------------------------------------

class NoSoilDetected(SoilSegError):
    """No detection with the soil label cleared the score threshold."""


class EmptyIntersection(SoilSegError):
    """No mask pixel survives clipping to the predicted box."""
