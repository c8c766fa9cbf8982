"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad inputs: shapes, ranges, empty sets, invalid flag combinations."""


class ConfigurationError(ValidationError):
    """A network/run configuration that names no known variant."""


class CapacityError(RuntimeError):
    """An operation would exceed a declared memory budget."""


class DepthBackendError(RuntimeError):
    """Requested depth backend is unavailable."""


class ExtractorUnavailableError(RuntimeError):
    """Pretrained perceptual feature extractor could not be loaded."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was encountered; carries a diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointMismatchError(RuntimeError):
    """Checkpoint does not match the network spec it is being loaded into."""
