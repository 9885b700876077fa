"""Imitation training against the pose-based expert: data collection (with or
without dataset aggregation), the epoch/batch schedule, and per-desired-pose
fine-tuning.

Every visited simulator state contributes one sample (desired keypoints,
current keypoints, expert twist); labels are the expert command clamped to the
velocity limit, computed from ground-truth poses regardless of who is driving.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classic import pbvs
from .controllers import PbvsController, train_step
from .geometry import Pose, Twist, relative_pose
from .sim import (
    EpisodeConfig,
    EpisodeStart,
    Observation,
    check_success,
    run_episode,
    sample_desired_pose,
    sample_initial_pose,
)
from .camera import NonPositiveDepth, in_fov, point_depths, project


@dataclass
class DatasetNc:
    """Append-only sample buffer.  With the default unlimited capacity nothing
    is ever evicted within a run; a capacity bound drops oldest-first."""

    capacity: int | None = None
    _s_star: list[np.ndarray] = field(default_factory=list)
    _s: list[np.ndarray] = field(default_factory=list)
    _twist: list[np.ndarray] = field(default_factory=list)

    def append(self, s_star: np.ndarray, s: np.ndarray, twist: np.ndarray) -> None:
        self._s_star.append(np.asarray(s_star, dtype=float))
        self._s.append(np.asarray(s, dtype=float))
        self._twist.append(np.asarray(twist, dtype=float))
        if self.capacity is not None:
            excess = len(self) - self.capacity
            if excess > 0:
                self._compact()
                self._s_star = [self._s_star[0][excess:]]
                self._s = [self._s[0][excess:]]
                self._twist = [self._twist[0][excess:]]

    def _compact(self) -> None:
        if len(self._s_star) > 1:
            self._s_star = [np.concatenate(self._s_star)]
            self._s = [np.concatenate(self._s)]
            self._twist = [np.concatenate(self._twist)]

    def __len__(self) -> int:
        return sum(len(a) for a in self._s_star)

    def sample_batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Uniform with replacement over the full aggregated buffer."""
        if len(self) == 0:
            raise ValueError("dataset is empty")
        self._compact()
        idx = rng.integers(0, len(self), size=size)
        return self._s_star[0][idx], self._s[0][idx], self._twist[0][idx]


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 100
    collect_steps: int = 10000
    batches_per_epoch: int = 500
    batch_size: int = 512
    dagger: bool = True
    probe_episodes: int = 50

    def __post_init__(self) -> None:
        if min(self.epochs, self.collect_steps, self.batches_per_epoch, self.batch_size) <= 0:
            raise ValueError("schedule values must be positive")


def collect(
    policy,
    config: EpisodeConfig,
    steps: int,
    rng: np.random.Generator,
    drive_with_policy: bool,
    expert_lam: float | None = None,
    desired_pose: Pose | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather exactly `steps` (desired kp, current kp, clamped expert twist)
    samples.  The camera is driven by `policy` when drive_with_policy is true
    (the aggregation mode), otherwise by the expert itself; episodes respawn on
    termination until the budget is met.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    lam = expert_lam if expert_lam is not None else config.lam
    driver = policy if drive_with_policy else PbvsController(lam)
    uses_features = bool(getattr(driver, "uses_features", True))
    sigma = config.observer_noise_sigma

    s_star_out = np.empty((steps, config.model.n, 2))
    s_out = np.empty((steps, config.model.n, 2))
    twist_out = np.empty((steps, 6))
    count = 0
    while count < steps:
        desired = desired_pose if desired_pose is not None else sample_desired_pose(rng, config)
        initial = sample_initial_pose(rng, config, desired)
        s_star_true = project(config.model, desired, config.intrinsics)
        s_star_obs = s_star_true + sigma * rng.standard_normal(s_star_true.shape) if sigma > 0 else s_star_true
        driver.reset(EpisodeStart(s_star_obs, desired, config.model, config.intrinsics, config))
        pose = initial
        for step in range(config.max_steps):
            try:
                kp_true = project(config.model, pose, config.intrinsics)
            except NonPositiveDepth:
                break
            if step > 0 and uses_features and not in_fov(kp_true, config.intrinsics):
                break
            kp_obs = kp_true + sigma * rng.standard_normal(kp_true.shape) if sigma > 0 else kp_true
            kp_err_sum = float(np.abs(kp_obs - s_star_obs).sum())
            rel = relative_pose(desired, pose)
            expert_twist = pbvs(rel, lam).clamped(config.v_max).as_vector()

            s_star_out[count] = s_star_obs
            s_out[count] = kp_obs
            twist_out[count] = expert_twist
            count += 1
            if count >= steps:
                break

            ck, cp = check_success(kp_err_sum, rel, config)
            if ck or cp:
                break
            depths = point_depths(config.model, pose)
            try:
                command = driver.command(Observation(s_star_obs, kp_obs, rel, depths, config.intrinsics))
            except Exception:
                break
            twist = command if isinstance(command, Twist) else Twist.from_vector(np.asarray(command, dtype=float))
            pose = config.step_pose(pose, twist.clamped(config.v_max))
            if not config.workspace.contains(pose.translation):
                break
    return s_star_out, s_out, twist_out


def probe_success(controller, config: EpisodeConfig, episodes: int, rng: np.random.Generator,
                  desired_pose: Pose | None = None) -> tuple[float, float | None]:
    """(success rate %, mean steps over successes or None) for a quick evaluation."""
    succ = 0
    steps = []
    for _ in range(episodes):
        res = run_episode(controller, config, rng, desired_pose=desired_pose)
        if res.success:
            succ += 1
            steps.append(res.steps)
    sr = 100.0 * succ / episodes
    return sr, (float(np.mean(steps)) if steps else None)


@dataclass
class EpochLog:
    epoch: int
    dataset_size: int
    mean_loss: float
    probe_sr: float | None
    probe_ts: float | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "dataset_size": self.dataset_size,
                "mean_loss": self.mean_loss,
                "probe_sr": self.probe_sr,
                "probe_ts": self.probe_ts,
            }
        )


def train(
    controller,
    schedule: TrainSchedule,
    config: EpisodeConfig,
    rng: np.random.Generator,
    log_path: str | Path | None = None,
    probe: bool = True,
    dataset: DatasetNc | None = None,
    desired_pose: Pose | None = None,
) -> list[EpochLog]:
    """Epoch loop: collect (expert-driven at epoch 0 or whenever aggregation is
    off, learner-driven afterwards), then uniform random batches with
    replacement from the full aggregated buffer.  Deterministic under the rng.
    """
    dataset = dataset if dataset is not None else DatasetNc()
    logs: list[EpochLog] = []
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(schedule.epochs):
            drive = schedule.dagger and epoch >= 1
            s_star, s, twist = collect(
                controller, config, schedule.collect_steps, rng, drive_with_policy=drive, desired_pose=desired_pose
            )
            dataset.append(s_star, s, twist)
            losses = []
            for _ in range(schedule.batches_per_epoch):
                batch = dataset.sample_batch(rng, schedule.batch_size)
                losses.append(train_step(controller, *batch))
            if probe:
                probe_rng = np.random.default_rng(rng.integers(0, 2**63))
                sr, ts = probe_success(controller, config, schedule.probe_episodes, probe_rng, desired_pose=desired_pose)
            else:
                sr = ts = None
            entry = EpochLog(epoch, len(dataset), float(np.mean(losses)), sr, ts)
            logs.append(entry)
            if log_file is not None:
                log_file.write(entry.to_json() + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return logs


@dataclass
class FinetuneRound:
    round: int
    success_rate: float
    mean_steps: float | None


def finetune(
    controller,
    desired_pose: Pose,
    rounds: int,
    config: EpisodeConfig,
    rng: np.random.Generator,
    collect_steps: int = 10000,
    batches: int = 500,
    batch_size: int = 512,
    eval_episodes: int = 500,
    freeze_hyper: bool = False,
) -> list[FinetuneRound]:
    """Training with the desired pose frozen.  Returns the baseline evaluation
    (round 0) followed by one entry per fine-tune round; evaluation draws
    `eval_episodes` fresh initial poses against the fixed desired pose."""
    results = []
    had_freeze = getattr(controller, "freeze_hyper", None)
    if had_freeze is not None:
        controller.freeze_hyper = freeze_hyper
    try:
        eval_rng = np.random.default_rng(rng.integers(0, 2**63))
        sr, ts = probe_success(controller, config, eval_episodes, eval_rng, desired_pose=desired_pose)
        results.append(FinetuneRound(0, sr, ts))
        dataset = DatasetNc()
        for r in range(1, rounds + 1):
            # Round r reuses the training loop with the epoch index shifted so the
            # aggregation schedule (expert first, learner afterwards) carries over.
            drive = r >= 2
            s_star, s, twist = collect(
                controller, config, collect_steps, rng, drive_with_policy=drive, desired_pose=desired_pose
            )
            dataset.append(s_star, s, twist)
            for _ in range(batches):
                batch = dataset.sample_batch(rng, batch_size)
                train_step(controller, *batch)
            eval_rng = np.random.default_rng(rng.integers(0, 2**63))
            sr, ts = probe_success(controller, config, eval_episodes, eval_rng, desired_pose=desired_pose)
            results.append(FinetuneRound(r, sr, ts))
    finally:
        if had_freeze is not None:
            controller.freeze_hyper = had_freeze
    return results
