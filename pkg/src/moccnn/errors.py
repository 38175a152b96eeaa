"""Exception types shared across the package."""


class MoccnnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MoccnnError):
    """A configuration value is invalid or layers compose to an impossible shape."""


class ValidationError(MoccnnError):
    """Runtime data violates a precondition (shape mismatch, non-finite values,
    out-of-bounds annotations, undersized images)."""


class ParseError(MoccnnError):
    """A file (PGM image, annotation list, manifest, architecture override) is malformed."""


class UninitializedStatisticsError(MoccnnError):
    """Batchnorm evaluated in eval mode before any train-mode pass populated running stats."""


class OracleInvalidError(MoccnnError):
    """The computation handed to the finite-difference oracle is not deterministic."""


class MetricUndefinedError(MoccnnError):
    """A requested metric is undefined for the given data (e.g. MDE with a zero truth count).

    Carries ``scene_ids`` of the offending images and ``report``, the metrics
    that could still be computed.
    """

    def __init__(self, message, scene_ids=(), report=None):
        super().__init__(message)
        self.scene_ids = list(scene_ids)
        self.report = report


class TrainingDivergedError(MoccnnError):
    """A loss became non-finite during training. Carries diagnostics."""

    def __init__(self, message, step=None, expert_loss=None, gate_loss=None, max_param=None):
        super().__init__(message)
        self.step = step
        self.expert_loss = expert_loss
        self.gate_loss = gate_loss
        self.max_param = max_param


class CheckpointError(MoccnnError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
