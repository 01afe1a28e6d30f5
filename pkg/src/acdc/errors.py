"""Exception hierarchy shared across the package."""


class AcdcError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AcdcError, ValueError):
    pass


class ConfigError(AcdcError, ValueError):
    pass


class LoadError(AcdcError, IOError):
    """Raised when a sequence, dataset or detections file cannot be read."""


class CheckpointError(AcdcError, IOError):
    pass


class TrainingDiverged(AcdcError, RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
