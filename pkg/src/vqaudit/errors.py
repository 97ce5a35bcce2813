"""Exception types shared across the package."""


class VqAuditError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VqAuditError, ValueError):
    """Array dimensions do not match the declared layer or block widths."""


class FormatError(VqAuditError, ValueError):
    """A file (CSV, checkpoint, config) is malformed or truncated."""


class IoError(VqAuditError, OSError):
    """A file could not be read or written."""


class ConfigError(VqAuditError, ValueError):
    """A configuration document is invalid (unknown keys, bad ranges)."""


class ContractViolationError(VqAuditError, ValueError):
    """A cached intermediate was reused against mismatched state."""


class SchemaMismatchError(VqAuditError, ValueError):
    """Model and dataset were built from different encoding schemas."""


class CheckpointError(VqAuditError, ValueError):
    """Checkpoint version or content is unusable."""


class TrainingDivergenceError(VqAuditError, RuntimeError):
    """Loss or gradients became non-finite during training.

    Carries the model state at the failing step so callers can write a
    diagnostic checkpoint.
    """

    def __init__(self, message, model=None, epoch=None):
        super().__init__(message)
        self.model = model
        self.epoch = epoch
