"""Error hierarchy shared by every grasp_learning module."""
from django.core.exceptions import ImproperlyConfigured


class GraspLearningError(Exception):
    """Base class for errors raised by the grasp_learning app."""


class InvalidArgumentError(GraspLearningError, ValueError):
    pass


class ShapeError(GraspLearningError, ValueError):
    pass


class UnsupportedLayerError(GraspLearningError):
    pass


class NoActionError(GraspLearningError):
    """Raised when no admissible action exists (empty mask)."""


class NoDataError(GraspLearningError):
    pass


class SceneTooCrowdedError(GraspLearningError):
    pass


class InvalidActionError(GraspLearningError):
    """Raised when a grasp pose falls outside the tray."""


class CheckpointError(GraspLearningError):
    pass


class ConfigurationError(GraspLearningError, ImproperlyConfigured):
    pass
