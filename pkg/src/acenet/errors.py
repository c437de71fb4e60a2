"""Exception hierarchy shared by all acenet modules."""


class AcenetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AcenetError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(AcenetError):
    """A configuration violates its declared constraints."""


class DataError(AcenetError):
    """Input data violates a precondition (bad labels, empty mask, ...)."""


class UsageError(AcenetError):
    """An API or CLI entry point was called incorrectly."""


class TrainingError(AcenetError):
    """The training loop hit a non-recoverable state (non-finite loss)."""


class CheckpointError(AcenetError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Unknown magic or unsupported format version."""


class CheckpointConfigError(CheckpointError):
    """Stored network config does not match the expected one."""


class CheckpointPayloadError(CheckpointError):
    """Payload truncated or inconsistent with the manifest entries."""
