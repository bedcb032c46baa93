"""Exception hierarchy shared across the toolkit.

Every error raised by this package derives from AdvPurifyError so CLI
handlers can map failures onto the documented exit codes.
"""


class AdvPurifyError(Exception):
    """Base class for all package errors."""


class ConfigError(AdvPurifyError):
    """Bad run configuration: parse failure, unknown key, invalid value."""


class UnknownDatasetError(AdvPurifyError):
    """Requested dataset name is not supported."""


class DataCacheError(AdvPurifyError):
    """On-disk dataset cache is unreadable or corrupt."""


class ContainerFormatError(AdvPurifyError):
    """Binary container is truncated, corrupt, or not a container at all."""


class ContainerVersionError(ContainerFormatError):
    """Binary container was written by a newer format version."""


class UnknownArchitectureError(AdvPurifyError):
    """Requested classifier architecture identifier is not supported."""


class TrainingDivergedError(AdvPurifyError):
    """Training produced a non-finite loss."""


class ShapeMismatchError(AdvPurifyError):
    """Array shape does not match the model or batch contract."""


class OracleBoundaryError(AdvPurifyError):
    """A strict label oracle was asked for gradients, logits, or parameters."""


class MissingCheckpointError(AdvPurifyError):
    """A required checkpoint file does not exist."""


class EmptyDenominatorError(AdvPurifyError):
    """No clean input was classified correctly, so success rate is undefined."""
