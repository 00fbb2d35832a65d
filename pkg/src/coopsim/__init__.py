"""Deterministic multi-vehicle cooperative SLAM and tracking simulator."""

from .geometry import Pose2, Transform2, between, compose, inverse, wrap_angle
from .pipeline import RunConfig, RunReport, run

__all__ = [
    "Pose2", "Transform2", "between", "compose", "inverse", "wrap_angle",
    "RunConfig", "RunReport", "run",
]

__version__ = "0.1.0"
