"""Exception types shared across the package."""


class MaxMilError(Exception):
    """Base class for all package errors."""


class FormatError(MaxMilError):
    """A binary file is not a recognizable FBAG/MIMX artifact."""


class ValidationError(MaxMilError):
    """Data violates a structural invariant (dimensions, ranges, labels)."""


class ConfigError(MaxMilError):
    """A configuration value is outside its allowed range."""


class TrainingError(MaxMilError):
    """Training cannot proceed or produced no usable model."""
