"""Exception hierarchy shared across the package."""


class HeightLiftError(Exception):
    """Base class for all package errors."""


class DimensionError(HeightLiftError):
    """Tensor or feature-map shapes are inconsistent with the operation."""


class ContractError(HeightLiftError):
    """An operation was called outside its documented contract."""


class GradCheckError(HeightLiftError):
    """A non-finite value appeared while gradient-checking an operation."""


class HorizonError(HeightLiftError):
    """A pixel ray never descends to the ground plane."""


class HeightAboveCameraError(HeightLiftError):
    """A requested height is at or above the camera height."""


class BehindCameraError(HeightLiftError):
    """A 3D point projects behind the camera."""


class DegenerateCameraError(HeightLiftError):
    """No pixel/height sample of a camera reaches the ground."""


class ParseError(HeightLiftError):
    """A data file is malformed. Carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PlacementError(HeightLiftError):
    """Scene generation could not place the requested objects."""


class ConfigError(HeightLiftError):
    """Unknown or invalid configuration key/value."""
