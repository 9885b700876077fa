"""Ideal pinhole camera: feature-point projection, FOV checks, built-in target models.

Camera frame: +Z is the optical axis (forward), +X maps to +u (right in the
image), +Y maps to +v (down in the image).  Keypoint sets are (n, 2) pixel
arrays whose row order always matches the target model's point order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose

MIN_DEPTH = 1e-6


class NonPositiveDepth(ValueError):
    """A model point lies at or behind the camera plane (Z <= MIN_DEPTH)."""

    def __init__(self, index: int, depth: float):
        self.index = index
        self.depth = depth
        super().__init__(f"point {index} has non-positive depth {depth:.3g} m")


class UnknownModel(ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown target model {name!r}; built-ins: {sorted(_BUILTIN_POINTS)}")


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels.

    The default focal length is wide enough that an expert trajectory over the
    full pose-sampling envelope almost never sweeps the target out of view
    mid-flight (at fx = 600 nearly a fifth of expert trajectories do, which
    caps every feature-based controller well below its achievable rate).
    """

    fx: float = 450.0
    fy: float = 450.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class TargetModel:
    """Named, ordered set of 3D feature points (meters, object frame)."""

    name: str
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if len(pts) < 3:
            raise ValueError("a target model needs at least 3 feature points for 6-DOF control")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return len(self.points)


# Feature-point coordinates (meters) in each object's own frame.
_BUILTIN_POINTS = {
    "apriltag": [
        [-0.0300, -0.0300, 0.0],
        [0.0300, -0.0300, 0.0],
        [0.0300, 0.0300, 0.0],
        [-0.0300, 0.0300, 0.0],
    ],
    "charging_port": [
        [0.0, 0.0, 0.0],
        [0.0160, 0.0, 0.0],
        [0.0325, 0.0, 0.0],
        [0.0750, -0.0150, 0.0],
        [0.0240, -0.0150, 0.0],
    ],
    "toy_horse": [
        [0.0320, 0.0030, 0.0250],
        [0.0900, 0.0030, 0.0250],
        [0.1140, 0.0850, 0.0350],
        [0.0410, 0.0680, 0.0230],
    ],
}


def builtin_model(name: str) -> TargetModel:
    if name not in _BUILTIN_POINTS:
        raise UnknownModel(name)
    return TargetModel(name, np.array(_BUILTIN_POINTS[name]))


def load_target_model(source: str | Path | dict) -> TargetModel:
    """Load a model from a JSON file or dict: {"name": ..., "points": [[x,y,z], ...]}."""
    if isinstance(source, (str, Path)):
        data = json.loads(Path(source).read_text())
    else:
        data = source
    return TargetModel(str(data["name"]), np.array(data["points"], dtype=float))


def camera_frame_points(model: TargetModel, camera_in_object: Pose) -> np.ndarray:
    """Model points expressed in the camera frame, (n, 3)."""
    return (model.points - camera_in_object.translation) @ camera_in_object.rotation


def point_depths(model: TargetModel, camera_in_object: Pose) -> np.ndarray:
    """Per-point depth (camera-frame Z, meters)."""
    return camera_frame_points(model, camera_in_object)[:, 2]


def project(model: TargetModel, camera_in_object: Pose, k: Intrinsics) -> np.ndarray:
    """Project model points to pixel coordinates, (n, 2) in model point order.

    Raises NonPositiveDepth if any point sits at or behind the camera plane.
    """
    cam = camera_frame_points(model, camera_in_object)
    z = cam[:, 2]
    bad = np.nonzero(z <= MIN_DEPTH)[0]
    if bad.size:
        raise NonPositiveDepth(int(bad[0]), float(z[bad[0]]))
    kp = np.empty((len(cam), 2))
    kp[:, 0] = k.fx * cam[:, 0] / z + k.cx
    kp[:, 1] = k.fy * cam[:, 1] / z + k.cy
    return kp


def in_fov(keypoints: np.ndarray, k: Intrinsics) -> bool:
    """True iff every pixel satisfies 0 <= u < width and 0 <= v < height."""
    kp = np.asarray(keypoints)
    u, v = kp[:, 0], kp[:, 1]
    return bool(np.all(u >= 0.0) and np.all(u < k.width) and np.all(v >= 0.0) and np.all(v < k.height))


def look_at_pose(position: np.ndarray, yaw: float = 0.0, target: np.ndarray | None = None) -> Pose:
    """Camera pose at `position` with the optical axis through `target` (default origin),
    spun by `yaw` about the optical axis.

    Canonical alignment at yaw 0 from straight above: image +u runs along the
    object's +Y axis and +v along +X, so the top-down view keeps object X/Y on
    the pixel axes.
    """
    position = np.asarray(position, dtype=float).reshape(3)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=float).reshape(3)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    forward = forward / norm
    x_cam = np.cross([1.0, 0.0, 0.0], forward)
    x_norm = np.linalg.norm(x_cam)
    if x_norm < 1e-9:
        raise ValueError("view direction parallel to the object X axis; canonical frame undefined")
    x_cam = x_cam / x_norm
    y_cam = np.cross(forward, x_cam)
    r = np.column_stack([x_cam, y_cam, forward])
    c, s = math.cos(yaw), math.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(r @ rz, position)
