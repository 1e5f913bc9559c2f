"""Shared exception types."""


class ConfigError(ValueError):
    """Bad or unknown configuration key/value."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, or incompatible."""


class NumericalDivergence(RuntimeError):
    """A training loss became non-finite; carries a reference to the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
