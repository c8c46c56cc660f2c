class DCPError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(DCPError, ValueError):
    """Input arrays or arguments violate an operation's contract."""


class ConfigError(DCPError, ValueError):
    """A configuration is malformed or describes an invalid combination."""


class SamplingError(DCPError, RuntimeError):
    """An episode cannot be drawn from the available data."""


class CheckpointError(DCPError, RuntimeError):
    """A checkpoint is unreadable or incompatible with the requested use."""


class NumericalError(DCPError, FloatingPointError):
    """Training produced a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
