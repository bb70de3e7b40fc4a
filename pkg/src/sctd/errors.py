"""Exception hierarchy shared across the package."""


class SctdError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SctdError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(SctdError, RuntimeError):
    """A caller violated an operation's precondition."""


class GraphError(ContractError):
    """The autodiff graph is in a state that forbids the request."""


class InputError(SctdError, ValueError):
    """Bad user-provided data (corpus, ids, labels)."""


class ConfigError(SctdError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(SctdError, FloatingPointError):
    """Overflow or invalid arithmetic inside a documented operation."""


class NonFiniteLossError(SctdError, RuntimeError):
    """Training produced a non-finite loss; ``diagnostics`` holds the dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IntegrityError(SctdError, IOError):
    """A checkpoint file failed its integrity check."""


class IncompatibleCheckpointError(SctdError, IOError):
    """A checkpoint was written by an incompatible format version."""
