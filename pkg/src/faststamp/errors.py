"""Exception hierarchy shared by all modules."""


class FastStampError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(FastStampError, ValueError):
    pass


class ConfigError(FastStampError, ValueError):
    pass


class CheckpointError(FastStampError):
    pass


class ManifestError(CheckpointError):
    """Manifest missing, unparsable or structurally invalid."""


class IntegrityError(CheckpointError):
    """Blob checksum does not match the manifest."""


class ShapeMismatchError(CheckpointError):
    """Checkpoint tensors do not fit the requested model configuration."""


class TruncatedBlobError(CheckpointError):
    pass


class ImageFormatError(FastStampError, ValueError):
    """Unsupported image format, bit depth or colour space."""


class TruncatedFileError(FastStampError, ValueError):
    pass


class DeadlockError(FastStampError, RuntimeError):
    def __init__(self, message, cycle=()):
        super().__init__(message)
        self.cycle = tuple(cycle)


class TrainingDivergedError(FastStampError, RuntimeError):
    def __init__(self, message, iteration, batch_index):
        super().__init__(message)
        self.iteration = iteration
        self.batch_index = batch_index
