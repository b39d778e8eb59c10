"""Exception types shared across the package."""


class IteachError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(IteachError):
    """Tensor shapes are incompatible with the requested operation."""


class GraphError(IteachError):
    """Autodiff graph misuse (no tape, consumed tape, non-scalar loss)."""


class ConfigError(IteachError):
    """Invalid configuration value or structure."""


class DegenerateMaskError(IteachError):
    """A softmax row has no valid position."""


class TrainingDivergedError(IteachError):
    """Non-finite gradient detected during optimization."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter '{param_name}'")
        self.param_name = param_name


class DataLoadError(IteachError):
    """Dataset file missing, malformed, or inconsistent with its manifest."""


class EmptyBatchError(IteachError):
    """A loss or metric was asked to reduce over zero valid samples."""
