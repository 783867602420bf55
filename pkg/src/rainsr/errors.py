"""Exception hierarchy shared by every rainsr module."""


class RainSRError(Exception):
    """Base class for all rainsr errors."""


class DimensionError(RainSRError):
    """Shape or size of an image/tensor violates an operation's contract."""


class RangeError(RainSRError):
    """Values fall outside the declared numeric range."""


class IngestError(RainSRError):
    """A dataset file could not be read."""


class EmptyDatasetError(RainSRError):
    """A dataset folder yields no usable images."""


class ConfigError(RainSRError):
    """Bad key, bad value, or missing requirement in a config file."""


class CheckpointError(RainSRError):
    """Checkpoint file is malformed, truncated, or incompatible."""


class SequencingError(RainSRError):
    """A pipeline stage was started before its prerequisites exist."""


class TrainingDivergenceError(RainSRError):
    """A loss or gradient became non-finite during training."""


class StaleTapeError(RainSRError):
    """Backward was called with intermediates that are no longer valid."""


class ManifestError(RainSRError):
    """Dataset or run manifest is missing entries or inconsistent."""
