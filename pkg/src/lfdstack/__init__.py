"""Learning-from-demonstration control stack for a redundant 7-DOF arm."""

from .errors import (
    ConfigError,
    DegenerateDemo,
    InstabilityAbort,
    LfdStackError,
    NoConvergence,
    SingularityError,
)
from .robot import RobotModel, JointState, TaskFrames, default_model

__all__ = [
    "ConfigError",
    "DegenerateDemo",
    "InstabilityAbort",
    "LfdStackError",
    "NoConvergence",
    "SingularityError",
    "RobotModel",
    "JointState",
    "TaskFrames",
    "default_model",
]

__version__ = "0.1.0"
