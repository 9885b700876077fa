"""SE(3) pose algebra: rotation/axis-angle conversion and twist integration.

Conventions:
    - A Pose (R, t) maps child-frame coordinates into the parent frame:
      x_parent = R @ x_child + t.  Composition a.compose(b) applies b first.
    - A Twist is a body-frame velocity (linear m/s, angular rad/s) of the
      frame the pose describes, expressed in that frame's own axes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Numerical switch points for the axis-angle extraction.  Below _SIN_EPS the
# standard sin-normalised formula loses precision and a first-order series is
# used; within _PI_EPS of pi the skew part vanishes and the axis is recovered
# from the dominant column of R + I.
_SIN_EPS = 1e-7
_PI_EPS = 1e-6


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius norm, det +1."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation (orthonormal, det +1) plus translation in meters.

    Immutable after construction; the backing arrays are write-protected so
    poses can be shared freely across threads.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other`, then `self`. Rotation is re-orthonormalized."""
        r = _orthonormalize(self.rotation @ other.rotation)
        t = self.rotation @ other.translation + self.translation
        return Pose(r, t)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map child-frame point(s) (3,) or (n, 3) into the parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def to_json(self) -> str:
        return json.dumps({"r": list(self.rotation.reshape(9)), "t": list(self.translation)})

    @staticmethod
    def from_json(text: str) -> "Pose":
        data = json.loads(text)
        return Pose(np.array(data["r"], dtype=float).reshape(3, 3), np.array(data["t"], dtype=float))


@dataclass(frozen=True)
class Twist:
    """Body-frame velocity command: linear (m/s) and angular (rad/s) in the current camera frame."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self) -> None:
        lin = np.array(self.linear, dtype=float).reshape(3)
        ang = np.array(self.angular, dtype=float).reshape(3)
        lin.setflags(write=False)
        ang.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "angular", ang)

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    def clamped(self, limit: float) -> "Twist":
        """Componentwise clip of all six entries to [-limit, +limit]."""
        return Twist(np.clip(self.linear, -limit, limit), np.clip(self.angular, -limit, limit))


def relative_pose(desired: Pose, current: Pose) -> Pose:
    """Current pose expressed in the desired frame: inverse(desired) ∘ current.

    Both inputs must be expressed in the same base frame.
    """
    return desired.inverse().compose(current)


def rotation_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector theta*u (radians) of a rotation matrix, |theta| in [0, pi].

    Stable at both singularities: a first-order series below the sin-epsilon
    threshold and column extraction from R + I near theta = pi.
    """
    r = np.asarray(r, dtype=float)
    cos_theta = min(1.0, max(-1.0, (np.trace(r) - 1.0) * 0.5))
    theta = math.acos(cos_theta)
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])

    if math.pi - theta < _PI_EPS:
        # Skew part vanishes; use the dominant column of (R + I)/2 = u u^T.
        m = r + np.eye(3)
        k = int(np.argmax(np.diag(m)))
        axis = m[:, k]
        axis = axis / np.linalg.norm(axis)
        # Keep continuity with the generic branch where the skew part still
        # carries the sign; fall back to a canonical sign exactly at pi.
        if np.dot(axis, vee) < 0.0:
            axis = -axis
        elif np.dot(axis, vee) == 0.0:
            nz = np.nonzero(axis)[0][0]
            if axis[nz] < 0.0:
                axis = -axis
        return theta * axis

    if math.sin(theta) < _SIN_EPS:
        # theta ~ 0: vee already equals sin(theta)*u ~ theta*u to first order.
        return vee

    return (theta / math.sin(theta)) * vee


def axis_angle_to_rotation(v: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; series expansion for very small angles."""
    v = np.asarray(v, dtype=float).reshape(3)
    theta = float(np.linalg.norm(v))
    k = skew(v)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _so3_left_jacobian(theta_vec: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(theta_vec))
    k = skew(theta_vec)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def integrate_twist(pose: Pose, twist: Twist, dt: float) -> Pose:
    """Advance a pose by a constant body-frame twist via the exact SE(3) exponential.

    Exactly substep-consistent: n substeps of dt/n reproduce the single step.
    The exponential couples rotation into the translation update (the camera
    center arcs while turning).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    theta_vec = dt * twist.angular
    r_delta = axis_angle_to_rotation(theta_vec)
    t_delta = _so3_left_jacobian(theta_vec) @ (dt * twist.linear)
    return pose.compose(Pose(r_delta, t_delta))


def integrate_twist_decoupled(pose: Pose, twist: Twist, dt: float) -> Pose:
    """Advance rotation by the exact SO(3) exponential and translation along the
    current body axes (no rotation-translation coupling).

    This is how a simulator that sets a world-frame linear velocity each tick
    behaves.  Under a proportional pose controller it keeps the camera center
    exactly on the straight segment to the goal, which the coupled SE(3)
    exponential does not.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    r = _orthonormalize(pose.rotation @ axis_angle_to_rotation(dt * twist.angular))
    t = pose.translation + pose.rotation @ (dt * twist.linear)
    return Pose(r, t)
