"""Exception types. Each carries a short machine-readable ``code`` used by the CLI."""


class AVSyncError(Exception):
    code = "E_GENERIC"


class ConfigError(AVSyncError, ValueError):
    code = "E_CONFIG"


class ShapeError(AVSyncError, ValueError):
    code = "E_SHAPE"


class ModeError(AVSyncError, ValueError):
    code = "E_MODE"


class DegenerateInputError(AVSyncError, ValueError):
    code = "E_DEGENERATE"


class PairConstructionError(AVSyncError, ValueError):
    code = "E_PAIRS"


class BatchError(AVSyncError, ValueError):
    code = "E_BATCH"


class MetricError(AVSyncError, ValueError):
    code = "E_METRIC"


class PretrainingError(AVSyncError, RuntimeError):
    code = "E_PRETRAIN"


class NonFiniteLossError(AVSyncError, FloatingPointError):
    code = "E_NONFINITE"


class MissingArtifactError(AVSyncError, FileNotFoundError):
    code = "E_MISSING"


class ArtifactIOError(AVSyncError, OSError):
    code = "E_IO"
