class SegmentationError(Exception):
    """Base class for every error raised by the segmentation stack."""


class DimensionError(SegmentationError, ValueError):
    """Operand shapes do not agree."""


class DataValidationError(SegmentationError, ValueError):
    """An input value is outside its documented domain."""


class ConfigError(SegmentationError, ValueError):
    """An experiment configuration is invalid."""


class UsageError(SegmentationError):
    """An API was called in a state or with a kind it does not support."""


class GenerationError(SegmentationError):
    """The scene generator could not place actors for a seed."""


class CheckpointError(SegmentationError):
    """A checkpoint file is malformed or does not match the model."""


class DatasetError(SegmentationError):
    """Reading or writing the on-disk dataset failed."""

    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(f"{message} ({path})" if path is not None else message)
