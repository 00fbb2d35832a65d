"""SE(2) pose algebra used throughout the simulator and optimizer.

Poses are (x, y, yaw) with yaw kept in (-pi, pi]. Composition follows
homogeneous-matrix semantics; the optimizer retraction is additive on
(x, y) with yaw wrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = theta % TWO_PI
    return r - TWO_PI if r > math.pi else r


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    r = np.asarray(theta) % TWO_PI
    return np.where(r > math.pi, r - TWO_PI, r)


@dataclass(frozen=True)
class Pose2:
    """Rigid pose in the plane: translation (x, y) and heading yaw."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(0.0, 0.0, 0.0)

    @staticmethod
    def from_array(a) -> "Pose2":
        return Pose2(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (N, 2) or (2,) from this frame to the parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation().T + self.translation()


@dataclass(frozen=True)
class Transform2:
    """2D rigid transform: rotation angle plus translation."""

    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))

    @staticmethod
    def identity() -> "Transform2":
        return Transform2(0.0, 0.0, 0.0)

    @staticmethod
    def from_pose(p: Pose2) -> "Transform2":
        return Transform2(p.yaw, p.x, p.y)

    def as_pose(self) -> Pose2:
        return Pose2(self.tx, self.ty, self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.as_pose().apply(points)

    def inverse(self) -> "Transform2":
        return Transform2.from_pose(inverse(self.as_pose()))

    def compose(self, other: "Transform2") -> "Transform2":
        return Transform2.from_pose(compose(self.as_pose(), other.as_pose()))


@dataclass(frozen=True)
class Tangent3:
    """Local update (dx, dy, dyaw) for the additive retraction."""

    dx: float = 0.0
    dy: float = 0.0
    dyaw: float = 0.0

    @staticmethod
    def zero() -> "Tangent3":
        return Tangent3(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dyaw])


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Homogeneous-matrix product a * b."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.yaw + b.yaw,
    )


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.yaw)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose inverse(a) * b, so compose(a, between(a, b)) == b."""
    dx = b.x - a.x
    dy = b.y - a.y
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.yaw - a.yaw)


def boxplus(p: Pose2, d: Tangent3) -> Pose2:
    """Additive retraction: translation added, yaw added then wrapped."""
    return Pose2(p.x + d.dx, p.y + d.dy, p.yaw + d.dyaw)


def embed_se3(t: Transform2) -> np.ndarray:
    """Zero-padded 4x4 homogeneous embedding of a planar transform."""
    m = np.eye(4)
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    m[0, 0], m[0, 1] = c, -s
    m[1, 0], m[1, 1] = s, c
    m[0, 3] = t.tx
    m[1, 3] = t.ty
    return m


def project_se2(m: np.ndarray) -> Transform2:
    """Recover the planar transform from a zero-padded 4x4 matrix."""
    return Transform2(math.atan2(m[1, 0], m[0, 0]), m[0, 3], m[1, 3])
