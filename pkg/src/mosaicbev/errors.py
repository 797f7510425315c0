"""Shared exception types for validation, file formats, and training aborts."""


class ValidationError(Exception):
    """An input value violates a documented invariant."""


class DatasetFormatError(ValidationError):
    """A dataset file failed to parse or violates the format contract."""


class ConfigError(ValidationError):
    """A configuration value is out of contract."""


class CheckpointError(Exception):
    """A checkpoint file is unreadable, truncated, or inconsistent."""


class NumericAbortError(Exception):
    """Training hit a non-finite loss and stopped."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
