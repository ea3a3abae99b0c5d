"""Exception types shared across the package."""


class RetractorError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(RetractorError, ValueError):
    """A parameter violates a documented precondition."""


class SingularGeometryError(RetractorError):
    """Geometry degenerate enough to make an operation undefined
    (coincident spring endpoints, singular initialization system)."""


class InvalidStateError(RetractorError):
    """An operation was invoked on an object whose state does not support
    it (for example instrument motion with no grasped nodes)."""


class NumericalDivergenceError(RetractorError):
    """The integrator produced growing or non-finite state."""


class ProjectionError(RetractorError):
    """A point at or behind the camera plane cannot be projected."""


class DegenerateFrameError(RetractorError):
    """The image frame cannot be constructed (coincident endpoints or
    reference point on the chord)."""


class InsufficientObservationError(RetractorError):
    """Too few visual samples to fit the boundary curve."""


class ShapeError(RetractorError, ValueError):
    """An array has the wrong length or shape."""


class TrainingDivergedError(RetractorError):
    """Training loss became non-finite."""


class ConfigError(RetractorError, ValueError):
    """A configuration document is missing, malformed, or contains
    unknown keys."""
