"""Exception types shared across the package."""


class EtecapError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EtecapError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(EtecapError):
    """A numeric contract was violated (NaN input, non-finite loss, ...)."""


class ContractError(EtecapError):
    """An operation was called outside its documented preconditions."""


class VocabError(EtecapError):
    """A token id is outside the vocabulary."""


class IngestionError(EtecapError):
    """A dataset record could not be loaded or validated."""


class ConfigError(EtecapError):
    """A run configuration field failed validation."""
