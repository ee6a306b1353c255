"""Exception types shared across the package."""


class DualStageError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DualStageError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(DualStageError):
    """A configuration value violates an invariant, or fields are inconsistent."""


class DataError(DualStageError):
    """A manifest row, image file, or preprocessing input is invalid."""


class GraphError(DualStageError):
    """The autodiff graph is unusable: non-scalar loss, or loss not on the tape."""


class NumericsError(DualStageError):
    """A non-finite value was detected where finite values are required."""


class CheckpointError(DualStageError):
    """A checkpoint file is malformed, truncated, or inconsistent with the caller."""


class TrainError(DualStageError):
    """Training aborted (non-finite loss or gradient)."""


class MetricsError(DualStageError):
    """Metric inputs are degenerate (empty, no positives, out-of-range labels)."""
