"""Exception hierarchy shared across the engine."""


class InkganError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(InkganError, ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(InkganError, ValueError):
    """Input values outside an operation's mathematical domain."""


class GraphError(InkganError, ValueError):
    """Autodiff misuse, e.g. backward on a non-scalar."""


class ConfigError(InkganError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(InkganError, ValueError):
    """Malformed dataset files or manifests."""


class MetricError(InkganError, ValueError):
    """Invalid inputs to an evaluation metric."""


class GradientError(InkganError, ValueError):
    """Missing, mismatched or non-finite gradients handed to the optimizer."""


class CheckpointError(InkganError, ValueError):
    """Unreadable, corrupt or version-incompatible checkpoint file."""


class TrainingError(InkganError, RuntimeError):
    """Training aborted, e.g. a non-finite loss."""
