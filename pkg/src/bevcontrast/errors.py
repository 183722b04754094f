"""Shared exception and warning types."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class PointCloudParseError(ValueError):
    """A point-cloud file row failed to parse; message carries the line number."""


class PointCloudFormatError(ValueError):
    """A point-cloud file mixes 3- and 4-column rows."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NoRegionsError(RuntimeError):
    """Semantic pooling produced zero regions; the caller decides how to proceed."""


class NumericalError(FloatingPointError):
    """A forward or backward pass produced a non-finite value."""


class CheckpointError(RuntimeError):
    """A parameter checkpoint is missing, corrupt, or of the wrong version."""


class DataWarning(UserWarning):
    """Degenerate-but-tolerated input: degraded sampling, clamped queries, etc."""
