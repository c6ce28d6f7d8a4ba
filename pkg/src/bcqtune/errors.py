"""Exception hierarchy shared by every module in the package."""


class BCQError(Exception):
    """Base class for all package errors."""


class ShapeError(BCQError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(BCQError, ValueError):
    """A hyperparameter or geometry is invalid for the data it is applied to."""


class InputError(BCQError, ValueError):
    """Model input (token ids, sequence length) is out of range."""


class CacheReuseError(BCQError, RuntimeError):
    """A forward cache was handed to backward more than once."""


class TrainingDivergedError(BCQError, RuntimeError):
    """Loss or gradients became non-finite during training.

    ``last_good`` holds the trainable scale values from the last finite step;
    the model passed to ``train`` has already been restored to them.
    """

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class IntegrityError(BCQError):
    """A file is truncated or structurally malformed."""


class BadMagicError(IntegrityError):
    pass


class ChecksumError(IntegrityError):
    pass


class VersionError(IntegrityError):
    pass


class CompatibilityError(BCQError):
    """A task checkpoint does not belong to the base model it is applied to."""
