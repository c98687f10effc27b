"""Error types shared across the pipeline.

The CLI maps these onto exit codes: ConfigError and bad usage exit 1,
DataError (and its subclasses) exit 2, partial per-sample failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (missing bank, bad mode, ...)."""


class DataError(Exception):
    """Input data is missing or unusable for the requested operation."""


class FormatError(DataError):
    """A binary file does not follow the feature-tensor format."""


class DegenerateInputError(DataError):
    """Too few usable points/rows for the operation."""


class NoPlaneError(DataError):
    """Plane fitting found no model above the inlier threshold."""
