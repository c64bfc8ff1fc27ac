"""Exception types raised across the package."""


class FedPruneError(Exception):
    """Base class for all package errors."""


class ConfigError(FedPruneError, ValueError):
    """Invalid architecture, schedule or experiment configuration."""


class ShapeError(FedPruneError, ValueError):
    """Input data does not match the model's expected shape."""


class AlignmentError(FedPruneError, ValueError):
    """Vectors that must line up (params, masks, moments) do not."""


class DataError(FedPruneError, ValueError):
    """Missing, empty or malformed data."""


class IntegrityError(FedPruneError, ValueError):
    """A model violates its mask (nonzero value at a pruned position)."""


class CodecError(FedPruneError, ValueError):
    """A sparse blob could not be decoded."""
