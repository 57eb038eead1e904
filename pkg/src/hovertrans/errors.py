"""Exception types shared across the package.

The CLI maps :class:`ValidationError` (and subclasses) to exit status 1 and
every other :class:`HoverError` to exit status 2.
"""


class HoverError(Exception):
    """Base class for all package errors."""


class ValidationError(HoverError, ValueError):
    """Input data or arguments violate a documented contract."""


class ConfigError(ValidationError):
    """A configuration value is invalid or inconsistent with the geometry."""


class IngestionError(ValidationError):
    """A manifest row references a file that is missing or undecodable."""


class UndefinedMetricError(ValidationError):
    """A metric cannot be computed for the given inputs (e.g. single class)."""


class TrainingError(HoverError, RuntimeError):
    """Training diverged or otherwise failed at runtime."""
