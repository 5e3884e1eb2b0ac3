"""Exceptions raised across anglekit."""


class AngleKitError(Exception):
    """Base class for every anglekit failure."""


class ConfigError(AngleKitError, ValueError):
    """Invalid or unknown configuration key/value."""


class ManifestError(AngleKitError, ValueError):
    """Annotation CSV or image set does not satisfy the manifest contract."""


class GeometryError(AngleKitError, ValueError):
    """Point, transform or window outside its valid domain."""


class ShapeError(AngleKitError, ValueError):
    """Tensor shape does not match what a network expects."""


class NoResponseError(AngleKitError):
    """A heatmap carried no response (all values zero)."""


class GradCheckError(AngleKitError, ValueError):
    """Finite-difference check produced a non-finite loss."""


class EvaluationError(AngleKitError, ValueError):
    """Metric inputs are empty or missing a required class/side."""


class CheckpointError(AngleKitError):
    """Checkpoint file is unreadable or was written by another format version."""
