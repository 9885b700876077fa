"""Classical visual servo laws: pose-based (PBVS) and image-based (IBVS)."""

from __future__ import annotations

import numpy as np

from .camera import Intrinsics
from .geometry import Pose, Twist, rotation_to_axis_angle

# Tikhonov damping for the IBVS pseudo-inverse; a bare pseudo-inverse blows up
# near singular feature configurations.
DEFAULT_DAMPING = 1e-6
_CONDITION_LIMIT = 1e12


class SingularInteraction(RuntimeError):
    """Degenerate feature configuration: the damped normal matrix is numerically singular."""


def pbvs(rel: Pose, lam: float) -> Twist:
    """Proportional pose-based control law from the relative pose of the current
    camera expressed in the desired camera frame.

    linear = -lam * R^T t, angular = -lam * theta*u.  The result is not
    clamped; velocity limits are the simulator's job.
    """
    linear = -lam * (rel.rotation.T @ rel.translation)
    angular = -lam * rotation_to_axis_angle(rel.rotation)
    return Twist(linear, angular)


def normalize_pixels(keypoints: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Pixel coordinates to normalized image coordinates x=(u-cx)/fx, y=(v-cy)/fy."""
    kp = np.asarray(keypoints, dtype=float)
    out = np.empty_like(kp)
    out[:, 0] = (kp[:, 0] - k.cx) / k.fx
    out[:, 1] = (kp[:, 1] - k.cy) / k.fy
    return out


def interaction_matrix(normalized: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Stacked (2n, 6) image Jacobian relating camera twist to normalized point velocity.

    Per point (x, y, Z):
        [[-1/Z,    0,  x/Z,    x*y, -(1+x^2),  y],
         [   0, -1/Z,  y/Z,  1+y^2,     -x*y, -x]]
    """
    normalized = np.asarray(normalized, dtype=float)
    depths = np.asarray(depths, dtype=float)
    n = len(normalized)
    L = np.zeros((2 * n, 6))
    x, y, z = normalized[:, 0], normalized[:, 1], depths
    L[0::2, 0] = -1.0 / z
    L[0::2, 2] = x / z
    L[0::2, 3] = x * y
    L[0::2, 4] = -(1.0 + x * x)
    L[0::2, 5] = y
    L[1::2, 1] = -1.0 / z
    L[1::2, 2] = y / z
    L[1::2, 3] = 1.0 + y * y
    L[1::2, 4] = -x * y
    L[1::2, 5] = -x
    return L


def ibvs(
    current: np.ndarray,
    desired: np.ndarray,
    depths: np.ndarray,
    k: Intrinsics,
    lam: float,
    damping: float = DEFAULT_DAMPING,
) -> Twist:
    """Image-based control law from matched 2D keypoints.

    The error is the stacked normalized-coordinate difference (current -
    desired); the command is -lam * L^+ e with a damped pseudo-inverse of the
    interaction matrix built from the current normalized points and `depths`.
    """
    depths = np.asarray(depths, dtype=float)
    if np.any(depths <= 0.0):
        raise ValueError("IBVS depths must be positive")
    cur = normalize_pixels(current, k)
    des = normalize_pixels(desired, k)
    if cur.shape != des.shape or len(cur) != len(depths):
        raise ValueError("current, desired and depths must have matching point counts")
    if len(cur) < 3:
        raise ValueError("IBVS needs at least 3 points for 6-DOF control")
    err = (cur - des).reshape(-1)
    L = interaction_matrix(cur, depths)
    normal = L.T @ L + damping * np.eye(6)
    if np.linalg.cond(normal) > _CONDITION_LIMIT:
        raise SingularInteraction(f"damped normal matrix condition exceeds {_CONDITION_LIMIT:g}")
    v = -lam * np.linalg.solve(normal, L.T @ err)
    return Twist(v[:3], v[3:])
