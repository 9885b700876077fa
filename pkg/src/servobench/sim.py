"""Episode engine: pose sampling, the 0.1 s control loop, termination and metrics.

A controller is any object with:
    uses_features: bool   -- whether it consumes keypoint observations.  The
                             feature-lost termination rule only applies to
                             controllers that do; a ground-truth pose
                             controller keeps flying when the target leaves
                             the image, like a real arm driven from kinematics.
    reset(start: EpisodeStart) -> None
    command(obs: Observation) -> np.ndarray (6,) or Twist

Observer model: the controller sees projected keypoints plus optional i.i.d.
Gaussian pixel noise (a stand-in for a learned keypoint extractor).  The
desired keypoints are observed once at episode start; current keypoints get
fresh noise each step.  Physics (FOV checks, pose errors) always use the true
geometry; the keypoint-error sum that drives the convergence test uses the
observed values, which coincide with the true ones at sigma = 0.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import Intrinsics, NonPositiveDepth, TargetModel, in_fov, look_at_pose, point_depths, project
from .geometry import Pose, Twist, integrate_twist, integrate_twist_decoupled, relative_pose, rotation_to_axis_angle


class SamplingExhausted(RuntimeError):
    """Rejection sampling failed to find an admissible pose."""


class Outcome(enum.Enum):
    CONVERGED_KEYPOINTS = "converged_keypoints"
    CONVERGED_POSE = "converged_pose"
    MAX_STEPS = "max_steps"
    LEFT_WORKSPACE = "left_workspace"
    FEATURE_LOST = "feature_lost"


@dataclass(frozen=True)
class WorkspaceBounds:
    """Axis-aligned box (meters, object frame) the camera must stay inside."""

    x: tuple[float, float] = (-0.4, 0.4)
    y: tuple[float, float] = (-0.4, 0.4)
    z: tuple[float, float] = (0.02, 0.6)

    def contains(self, p: np.ndarray) -> bool:
        return bool(
            self.x[0] <= p[0] <= self.x[1]
            and self.y[0] <= p[1] <= self.y[1]
            and self.z[0] <= p[2] <= self.z[1]
        )


@dataclass(frozen=True)
class SamplingConfig:
    """Desired/initial camera pose distributions.

    mode "paper": desired poses 15 cm above the object with up to 5 cm
    per-axis disturbance, initial poses 30 cm above with up to 10 cm; both
    look at the object center with uniform yaw, rejected until all keypoints
    are in view and the initial-to-desired offset stays inside the stated
    envelope (translation and axis-angle component maxima).

    mode "small_translation": initial pose = desired pose shifted by up to
    `small_translation_max` per axis, same orientation (the easy regime where
    image-based control is expected to work).
    """

    desired_height: float = 0.15
    desired_jitter: float = 0.05
    initial_height: float = 0.30
    initial_jitter: float = 0.10
    max_translation_offset: tuple[float, float, float] = (0.15, 0.15, 0.30)
    max_rotation_offset_deg: tuple[float, float, float] = (53.1, 53.1, 180.0)
    mode: str = "paper"
    small_translation_max: float = 0.02
    max_attempts: int = 100


@dataclass(frozen=True)
class EpisodeConfig:
    """Episode protocol constants.  Defaults are the simulation settings:
    10 px keypoint threshold, 600-step cap at 0.1 s/step, pi/36 rad and
    0.866 cm pose thresholds, 0.15 m/s (rad/s) velocity limit, gain 0.4.
    """

    model: TargetModel
    intrinsics: Intrinsics = Intrinsics()
    dt: float = 0.1
    max_steps: int = 600
    kp_threshold: float = 10.0
    re_threshold: float = math.pi / 36.0
    te_threshold: float = 0.00866
    v_max: float = 0.15
    lam: float = 0.4
    workspace: WorkspaceBounds = WorkspaceBounds()
    observer_noise_sigma: float = 0.0
    sampling: SamplingConfig = SamplingConfig()
    integrator: str = "decoupled"  # or "se3" for the coupled exponential

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if min(self.kp_threshold, self.re_threshold, self.te_threshold, self.v_max) <= 0:
            raise ValueError("thresholds and velocity limit must be positive")
        if self.integrator not in ("decoupled", "se3"):
            raise ValueError("integrator must be 'decoupled' or 'se3'")

    def step_pose(self, pose: Pose, twist: Twist) -> Pose:
        if self.integrator == "se3":
            return integrate_twist(pose, twist, self.dt)
        return integrate_twist_decoupled(pose, twist, self.dt)


@dataclass(frozen=True)
class EpisodeStart:
    """What a controller may inspect when an episode begins."""

    s_star: np.ndarray  # observed desired keypoints, (n, 2) px
    desired_pose: Pose
    model: TargetModel
    intrinsics: Intrinsics
    config: "EpisodeConfig"


@dataclass(frozen=True)
class Observation:
    """Per-step controller input.  Learned/image controllers should only read
    the keypoint fields; rel_pose and depths carry the simulator's ground
    truth for pose-based control and for true-depth IBVS."""

    s_star: np.ndarray  # (n, 2) px, fixed for the episode
    s: np.ndarray  # (n, 2) px, fresh observation
    rel_pose: Pose  # current camera in the desired camera frame
    depths: np.ndarray  # (n,) true point depths in the current camera frame
    intrinsics: Intrinsics


@dataclass
class StepRecord:
    pose: Pose
    keypoints: np.ndarray  # true projected pixels
    twist: np.ndarray  # executed (clamped) command, zeros on the terminal row
    kp_err_sum: float
    clamped: bool  # whether the limit altered the controller's command


@dataclass
class EpisodeResult:
    outcome: Outcome
    steps: int
    rotation_error: float  # rad, final
    translation_error: float  # m, final
    success: bool
    converged_kp: bool
    converged_pose: bool
    desired_pose: Pose
    initial_pose: Pose
    final_pose: Pose
    trajectory: list[StepRecord] = field(default_factory=list)
    detail: str | None = None

    @property
    def pose_hash(self) -> str:
        """Digest of the (desired, initial) pose pair, for paired-evaluation checks."""
        h = hashlib.sha256()
        for p in (self.desired_pose, self.initial_pose):
            h.update(p.rotation.tobytes())
            h.update(p.translation.tobytes())
        return h.hexdigest()


def pose_errors(desired: Pose, current: Pose) -> tuple[float, float]:
    """(rotation error rad, translation error m) from the relative pose."""
    rel = relative_pose(desired, current)
    re = float(np.linalg.norm(rotation_to_axis_angle(rel.rotation)))
    te = float(np.linalg.norm(rel.translation))
    return re, te


def check_success(kp_err_sum: float, rel: Pose, config: EpisodeConfig) -> tuple[bool, bool]:
    """(keypoints converged, pose converged).

    Keypoint convergence uses the inclusive bound sum <= threshold; pose
    convergence needs both errors strictly below their thresholds.  An
    episode counts as successful if either holds.
    """
    converged_kp = kp_err_sum <= config.kp_threshold
    re = float(np.linalg.norm(rotation_to_axis_angle(rel.rotation)))
    te = float(np.linalg.norm(rel.translation))
    converged_pose = re < config.re_threshold and te < config.te_threshold
    return converged_kp, converged_pose


def _sample_look_at(rng: np.random.Generator, height: float, jitter: float) -> Pose:
    delta = rng.uniform(-jitter, jitter, 3)
    position = np.array([delta[0], delta[1], height + delta[2]])
    yaw = rng.uniform(-math.pi, math.pi)
    return look_at_pose(position, yaw)


def _projects_in_fov(pose: Pose, config: EpisodeConfig) -> bool:
    try:
        kp = project(config.model, pose, config.intrinsics)
    except NonPositiveDepth:
        return False
    return in_fov(kp, config.intrinsics)


def sample_desired_pose(rng: np.random.Generator, config: EpisodeConfig) -> Pose:
    s = config.sampling
    for _ in range(s.max_attempts):
        pose = _sample_look_at(rng, s.desired_height, s.desired_jitter)
        if _projects_in_fov(pose, config):
            return pose
    raise SamplingExhausted(f"no desired pose with all keypoints in view after {s.max_attempts} attempts")


def _offset_within_envelope(desired: Pose, candidate: Pose, s: SamplingConfig) -> bool:
    rel = relative_pose(desired, candidate)
    t_max = np.asarray(s.max_translation_offset)
    if np.any(np.abs(rel.translation) > t_max + 1e-12):
        return False
    r_max = np.deg2rad(np.asarray(s.max_rotation_offset_deg))
    aa = rotation_to_axis_angle(rel.rotation)
    return bool(np.all(np.abs(aa) <= r_max + 1e-12))


def sample_initial_pose(rng: np.random.Generator, config: EpisodeConfig, desired: Pose) -> Pose:
    s = config.sampling
    if s.mode == "small_translation":
        for _ in range(s.max_attempts):
            shift = rng.uniform(-s.small_translation_max, s.small_translation_max, 3)
            pose = Pose(desired.rotation, desired.translation + shift)
            if _projects_in_fov(pose, config):
                return pose
        raise SamplingExhausted("no small-translation initial pose found")
    for _ in range(s.max_attempts):
        pose = _sample_look_at(rng, s.initial_height, s.initial_jitter)
        if _offset_within_envelope(desired, pose, s) and _projects_in_fov(pose, config):
            return pose
    raise SamplingExhausted(f"no admissible initial pose after {s.max_attempts} attempts")


def _as_twist(command) -> Twist:
    if isinstance(command, Twist):
        return command
    return Twist.from_vector(np.asarray(command, dtype=float))


def run_episode(
    controller,
    config: EpisodeConfig,
    rng: np.random.Generator,
    desired_pose: Pose | None = None,
    initial_pose: Pose | None = None,
    record_trajectory: bool = False,
) -> EpisodeResult:
    """Run one servo episode and return its result.

    Per step: observe, test convergence, query the controller, clamp the
    command componentwise to +/- v_max, integrate for dt, then test the
    workspace box and (for feature-consuming controllers) the field of view.
    """
    desired = desired_pose if desired_pose is not None else sample_desired_pose(rng, config)
    initial = initial_pose if initial_pose is not None else sample_initial_pose(rng, config, desired)
    sigma = config.observer_noise_sigma
    uses_features = bool(getattr(controller, "uses_features", True))

    s_star_true = project(config.model, desired, config.intrinsics)
    s_star_obs = s_star_true + sigma * rng.standard_normal(s_star_true.shape) if sigma > 0 else s_star_true
    controller.reset(EpisodeStart(s_star_obs, desired, config.model, config.intrinsics, config))

    pose = initial
    trajectory: list[StepRecord] = []
    outcome: Outcome | None = None
    detail: str | None = None
    converged_kp = converged_pose = False
    steps = 0

    for step in range(config.max_steps + 1):
        steps = step
        try:
            kp_true = project(config.model, pose, config.intrinsics)
        except NonPositiveDepth as err:
            outcome, detail = Outcome.FEATURE_LOST, str(err)
            kp_true = None
            break
        if step > 0 and uses_features and not in_fov(kp_true, config.intrinsics):
            outcome = Outcome.FEATURE_LOST
            break

        kp_obs = kp_true + sigma * rng.standard_normal(kp_true.shape) if sigma > 0 else kp_true
        kp_err_sum = float(np.abs(kp_obs - s_star_obs).sum())
        rel = relative_pose(desired, pose)
        converged_kp, converged_pose = check_success(kp_err_sum, rel, config)
        if converged_kp or converged_pose:
            outcome = Outcome.CONVERGED_KEYPOINTS if converged_kp else Outcome.CONVERGED_POSE
            break
        if step == config.max_steps:
            outcome = Outcome.MAX_STEPS
            break

        depths = point_depths(config.model, pose)
        try:
            raw = _as_twist(controller.command(Observation(s_star_obs, kp_obs, rel, depths, config.intrinsics)))
        except Exception as err:  # controller failure ends the episode as a loss
            outcome, detail = Outcome.FEATURE_LOST, f"controller error: {err}"
            break
        twist = raw.clamped(config.v_max)
        was_clamped = bool(np.any(twist.as_vector() != raw.as_vector()))
        if record_trajectory:
            trajectory.append(StepRecord(pose, kp_true, twist.as_vector(), kp_err_sum, was_clamped))

        pose = config.step_pose(pose, twist)
        if not config.workspace.contains(pose.translation):
            steps = step + 1
            outcome = Outcome.LEFT_WORKSPACE
            break

    assert outcome is not None
    if record_trajectory:
        final_kp = kp_true if kp_true is not None else np.full((config.model.n, 2), np.nan)
        final_err = float(np.abs(final_kp - s_star_obs).sum()) if kp_true is not None else math.nan
        trajectory.append(StepRecord(pose, final_kp, np.zeros(6), final_err, False))

    re, te = pose_errors(desired, pose)
    success = outcome in (Outcome.CONVERGED_KEYPOINTS, Outcome.CONVERGED_POSE)
    return EpisodeResult(
        outcome=outcome,
        steps=steps,
        rotation_error=re,
        translation_error=te,
        success=success,
        converged_kp=converged_kp,
        converged_pose=converged_pose,
        desired_pose=desired,
        initial_pose=initial,
        final_pose=pose,
        trajectory=trajectory,
        detail=detail,
    )


def export_trajectory_csv(result: EpisodeResult, path: str | Path) -> None:
    """One row per step: step, pose (9 rotation entries row-major + 3 translation),
    per-keypoint u/v, twist (6), keypoint error sum.  The last row is the
    terminal state with a zero twist."""
    if not result.trajectory:
        raise ValueError("episode was run without record_trajectory=True")
    n = result.trajectory[0].keypoints.shape[0]
    header = (
        ["step"]
        + [f"r{i}{j}" for i in range(3) for j in range(3)]
        + ["tx", "ty", "tz"]
        + [f"kp{i}_{ax}" for i in range(n) for ax in ("u", "v")]
        + ["vx", "vy", "vz", "wx", "wy", "wz", "kp_err_sum"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, rec in enumerate(result.trajectory):
            row = [i]
            row += list(rec.pose.rotation.reshape(9))
            row += list(rec.pose.translation)
            row += list(rec.keypoints.reshape(-1))
            row += list(rec.twist)
            row.append(rec.kp_err_sum)
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def episode_summary(result: EpisodeResult) -> dict:
    """JSON-ready episode summary (paired with the CSV export)."""
    return {
        "outcome": result.outcome.value,
        "steps": result.steps,
        "success": result.success,
        "converged_kp": result.converged_kp,
        "converged_pose": result.converged_pose,
        "rotation_error_rad": result.rotation_error,
        "translation_error_m": result.translation_error,
        "desired_pose": json.loads(result.desired_pose.to_json()),
        "initial_pose": json.loads(result.initial_pose.to_json()),
        "final_pose": json.loads(result.final_pose.to_json()),
        "pose_hash": result.pose_hash,
        "detail": result.detail,
    }
