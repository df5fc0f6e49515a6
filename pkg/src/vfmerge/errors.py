"""Exception taxonomy shared across the package."""


class VfmergeError(Exception):
    """Base class for package errors."""


class InputError(VfmergeError, ValueError):
    """Invalid runtime input: bad image shape, empty prompt, out-of-bounds box."""


class ConfigError(VfmergeError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointFormatError(VfmergeError, ValueError):
    """Checkpoint directory fails manifest validation."""


class MergeError(VfmergeError, ValueError):
    """Parameter-space merge failed (e.g. manifests disagree)."""


class TrainingError(VfmergeError, RuntimeError):
    """Training diverged (non-finite loss) or violated a contract."""


class NumericError(VfmergeError, ValueError):
    """Non-finite value where a finite one is required."""
