"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code table, so new error conditions
should reuse one of the existing classes rather than raising bare
ValueError/RuntimeError.
"""


class QprotoError(Exception):
    """Base class for all package errors."""


class DimensionError(QprotoError):
    """Tensor shapes do not line up for the requested operation."""


class RangeError(QprotoError):
    """A scalar argument is outside its legal range (e.g. k > n)."""


class ContractError(QprotoError):
    """An operation was called in a way its contract forbids."""


class StateError(QprotoError):
    """Stateful component used before it was initialized."""


class ConfigError(QprotoError):
    """Invalid or inconsistent run configuration."""


class DatasetError(QprotoError):
    """Dataset cannot satisfy the request (e.g. too few samples)."""


class DataFormatError(QprotoError):
    """On-disk dataset bytes are malformed; carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(QprotoError):
    """Loaded data violates a cross-file invariant (e.g. split overlap)."""


class CheckpointError(QprotoError):
    """Checkpoint is incompatible: version or config digest mismatch."""


class NumericsError(QprotoError):
    """Training hit NaN/Inf and was aborted."""
