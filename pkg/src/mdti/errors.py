"""Exception types raised across the package."""


class MDTIError(Exception):
    """Base class for all package errors."""


class ShapeError(MDTIError, ValueError):
    pass


class ConfigError(MDTIError, ValueError):
    pass


class OutOfBoundsError(MDTIError, ValueError):
    def __init__(self, index: int, point, message: str | None = None):
        self.index = index
        self.point = point
        super().__init__(message or f"point {index} {tuple(point)} lies outside the grid bbox")


class TrajectoryTooShortError(MDTIError, ValueError):
    pass


class EmbedderError(MDTIError, RuntimeError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        super().__init__(f"embedding prompt {index} failed: {cause}")


class NonFiniteLossError(MDTIError, FloatingPointError):
    pass


class CheckpointError(MDTIError, ValueError):
    pass
