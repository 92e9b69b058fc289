"""
Scanning MDP: probe actions in cylindrical coordinates, mode switching, rewards and termination
"""

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Deque, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from acoustics import ImagingPlaneResult, ProbeModel, render_imaging_plane
from episode_state import EpisodeOutcome, EpisodeStateMachine
from errors import EmptyEpisode, InvalidParams, NoContact, ResetFailed, SteppedDone
from geometry import (Pose, canonical_theta, cartesian_to_cyl, centerline_surface_angle,
                      probe_pose, project_to_skin)
from retry_strategies import RejectedSample, RetryManager
from scene import Anatomy, Scenario, denormalize_trajectory

HISTORY_LENGTH = 3


class Action(IntEnum):
    H_PLUS = 0
    H_MINUS = 1
    THETA_PLUS = 2
    THETA_MINUS = 3
    PHI_PLUS = 4
    PHI_MINUS = 5
    PSI_PLUS = 6
    PSI_MINUS = 7
    SWITCH = 8


N_ACTIONS = len(Action)


@dataclass(frozen=True)
class ActionSteps:
    """Per-action increments: mm for h, degrees for the angles"""
    h: float = 4.0
    theta: float = 3.0
    phi: float = 2.0
    psi: float = 2.0

    def delta(self, action: Action) -> Tuple[float, float, float, float]:
        sign = 1.0 if action % 2 == 0 else -1.0
        if action in (Action.H_PLUS, Action.H_MINUS):
            return sign * self.h, 0.0, 0.0, 0.0
        if action in (Action.THETA_PLUS, Action.THETA_MINUS):
            return 0.0, sign * self.theta, 0.0, 0.0
        if action in (Action.PHI_PLUS, Action.PHI_MINUS):
            return 0.0, 0.0, sign * self.phi, 0.0
        if action in (Action.PSI_PLUS, Action.PSI_MINUS):
            return 0.0, 0.0, 0.0, sign * self.psi
        return 0.0, 0.0, 0.0, 0.0


@dataclass
class RewardParams:
    alpha1: float = 1.0
    alpha2: float = 0.5
    shadow_threshold: float = 0.8
    k_end: float = 10.0
    success_fraction: float = 0.95
    switch_penalty: float = -1.0
    shadow_penalty: float = -0.1
    end_reward_distance_mode: str = "literal"
    end_bonus_replaces_step: bool = False
    max_steps: int = 80
    max_angle: float = 20.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InvalidParams("reward weights must be non-negative")
        if not 0.0 <= self.shadow_threshold <= 1.0:
            raise InvalidParams("shadow threshold must lie in [0, 1]")
        if not self.k_end > 0:
            raise InvalidParams("k_end must be positive")
        if not 0.0 < self.success_fraction <= 1.0:
            raise InvalidParams("success fraction must lie in (0, 1]")
        if self.end_reward_distance_mode not in ("literal", "exp"):
            raise InvalidParams(f"unknown end reward distance mode {self.end_reward_distance_mode}")
        if self.max_steps < 1:
            raise InvalidParams("max_steps must be at least 1")

    def shadow_gated(self, p_t: float) -> bool:
        """A threshold of 0 leaves coverage unconstrained"""
        return self.shadow_threshold > 0 and p_t >= self.shadow_threshold

    def step_reward(self, n_t: int, total: int, d_t: float, radius: float, p_t: float) -> float:
        return n_t / total + self.alpha1 * math.exp(-d_t / radius) + self.alpha2 * (1.0 - p_t)

    def end_reward(self, distances: Sequence[float], shadows: Sequence[float], radius: float) -> float:
        if self.end_reward_distance_mode == "exp":
            D = float(np.mean([math.exp(-d / radius) for d in distances]))
        else:
            D = float(np.mean([d / radius for d in distances]))
        P = float(np.mean([1.0 - p for p in shadows]))
        return self.k_end * (1.0 + self.alpha1 * D + self.alpha2 * P)


@dataclass(frozen=True)
class ProbeParams:
    h: float
    theta: float
    phi: float = 0.0
    psi: float = 0.0


@dataclass
class Observation:
    """Nine binary channels (three grids, oldest first) plus the mode scalar"""
    voxels: NDArray[np.uint8]
    mode: float


@dataclass
class StepRecord:
    step: int
    action: Optional[int]
    h: float
    theta: float
    phi: float
    psi: float
    adj: bool
    examining: bool
    p_t: float
    d_t: float
    n_t: int
    reward: float
    covered_fraction: float


@dataclass
class StepInfo:
    p_t: float
    d_t: float
    n_t: int
    coverage_fraction: float
    angle: float


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    outcome: EpisodeOutcome
    info: StepInfo


@dataclass
class EnvState:
    probe: ProbeParams
    pose: Pose
    adj: bool
    coverage_mask: NDArray[np.bool_]
    step_count: int
    grid_history: Deque[NDArray[np.uint8]]
    episode_log: List[StepRecord] = field(default_factory=list)
    poses: List[Pose] = field(default_factory=list)
    tracker: EpisodeStateMachine = field(default_factory=EpisodeStateMachine)

    @property
    def outcome(self) -> EpisodeOutcome:
        return self.tracker.current_state

    @property
    def done(self) -> bool:
        return self.tracker.is_terminal_state()


@dataclass
class EpisodeMetrics:
    success: bool
    steps: int
    P: float
    D: float


def assemble_state_tensor(history: Sequence[NDArray[np.uint8]], adj: bool) -> Observation:
    """Stack the last three grids channel-wise, oldest first"""
    if len(history) != HISTORY_LENGTH:
        raise ValueError(f"need exactly {HISTORY_LENGTH} grids, got {len(history)}")
    return Observation(np.concatenate(list(history), axis=0).astype(np.uint8), 1.0 if adj else 0.0)


def episode_metrics(log: Sequence[StepRecord], radius: float, outcome: EpisodeOutcome) -> EpisodeMetrics:
    """Success, step count and the examining-step averages P = mean(1 - p_t), D = mean(d_t / R_c)"""
    examining = [r for r in log if r.examining]
    if not examining:
        raise EmptyEpisode("episode has no examining-mode steps")
    P = float(np.mean([1.0 - r.p_t for r in examining]))
    D = float(np.mean([r.d_t / radius for r in examining]))
    steps = sum(1 for r in log if r.action is not None)
    return EpisodeMetrics(outcome is EpisodeOutcome.SUCCESS, steps, P, D)


TRAJECTORY_COLUMNS = ["step", "h", "theta", "phi", "psi", "x", "y", "z", "adj", "p_t", "d_t", "reward",
                      "covered_fraction"]


def export_trajectory_csv(log: Sequence[StepRecord], poses: Sequence[Pose], path: Union[str, Path],
                          anatomy: Optional[Anatomy] = None) -> str:
    """
    One row per taken action.

    With the scenario anatomy, poses of a normalized scene are mapped back
    to patient mm and h, theta are re-read from the mapped contact point.
    """
    if len(poses) != len(log):
        raise InvalidParams(f"{len(poses)} poses for {len(log)} log records")
    native = anatomy is not None and not anatomy.scale_to_generic.is_identity()
    if native:
        poses = denormalize_trajectory(poses, anatomy)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for r, pose in zip(log, poses):
            if r.action is None:
                continue
            h, theta = cartesian_to_cyl(anatomy.frame, pose.position)[:2] if native else (r.h, r.theta)
            x, y, z = pose.position
            writer.writerow([r.step, f"{h:.6f}", f"{theta:.6f}", f"{r.phi:.6f}", f"{r.psi:.6f}",
                             f"{x:.6f}", f"{y:.6f}", f"{z:.6f}",
                             int(r.adj), f"{r.p_t:.6f}", f"{r.d_t:.6f}", f"{r.reward:.9f}",
                             f"{r.covered_fraction:.6f}"])
    return str(path)


class ScanEnvironment:
    """One scenario, one probe; not thread-safe, one instance per actor"""

    def __init__(self, scenario: Scenario, reward: Optional[RewardParams] = None,
                 probe: Optional[ProbeModel] = None, steps: Optional[ActionSteps] = None,
                 retry_manager: Optional[RetryManager] = None, log_monitor: Optional[Any] = None):
        self.scenario = scenario
        self.reward = reward or RewardParams()
        self.probe = probe or ProbeModel()
        self.steps = steps or ActionSteps()
        self.retry_manager = retry_manager or RetryManager()
        self.log_monitor = log_monitor
        self.grid = scenario.grid.copy()
        self.frame = scenario.anatomy.frame
        self.skin = scenario.anatomy.skin
        self.total_target = int(self.grid.target.sum())
        if self.total_target == 0:
            raise InvalidParams("scenario has no target voxels inside the state grid")
        self.state: Optional[EnvState] = None

    @property
    def radius(self) -> float:
        return self.frame.radius

    def place_probe(self, probe: ProbeParams) -> Tuple[Pose, float]:
        """Pose at (h, theta, phi, psi) and the centerline-to-normal angle"""
        contact, normal = project_to_skin(self.frame, probe.h, probe.theta, self.skin)
        pose = probe_pose(contact, self.frame, probe.phi, probe.psi)
        return pose, centerline_surface_angle(pose, normal)

    def _render(self, pose: Pose, coverage_mask: NDArray[np.bool_]) -> ImagingPlaneResult:
        return render_imaging_plane(self.grid, pose, self.probe, coverage_mask, self.reward.shadow_threshold)

    def _start_probe(self, rng: np.random.Generator) -> ProbeParams:
        config = self.scenario.config
        if config.start_rule == "fixed":
            h, theta, phi, psi = config.start_pose
            return ProbeParams(self.frame.clamp_h(h), canonical_theta(theta), phi, psi)
        if config.start_rule == "above_target":
            centroid = self.grid.origin + (np.argwhere(self.grid.target).mean(axis=0) + 0.5) * self.grid.resolution
            h, theta, _ = cartesian_to_cyl(self.frame, centroid)
            return ProbeParams(self.frame.clamp_h(h), theta)
        return ProbeParams(float(rng.uniform(self.frame.h_min, self.frame.h_max)),
                           canonical_theta(float(rng.uniform(0.0, 360.0))))

    def _draw_start(self, rng: np.random.Generator) -> Tuple[ProbeParams, Pose]:
        probe = self._start_probe(rng)
        try:
            pose, angle = self.place_probe(probe)
        except NoContact as e:
            raise RejectedSample(str(e))
        if angle > self.reward.max_angle:
            raise RejectedSample(f"start angle {angle:.1f} exceeds {self.reward.max_angle}")
        return probe, pose

    def reset(self, rng: np.random.Generator) -> Observation:
        """Start a new episode; random starts are redrawn until the angle limit holds"""
        if self.scenario.config.start_rule == "random":
            probe, pose = self.retry_manager.retry('start_pose', lambda: self._draw_start(rng),
                                                   exhausted_error=ResetFailed)
        else:
            try:
                probe, pose = self._draw_start(rng)
            except RejectedSample as e:
                raise ResetFailed(f"start pose rejected: {e}")

        coverage = np.zeros(self.grid.dims, dtype=bool)
        plane = self._render(pose, coverage)
        snapshot = self.grid.data.copy()
        history = deque([snapshot.copy() for _ in range(HISTORY_LENGTH)], maxlen=HISTORY_LENGTH)
        self.state = EnvState(
            probe=probe,
            pose=pose,
            adj=False,
            coverage_mask=coverage,
            step_count=0,
            grid_history=history,
            episode_log=[StepRecord(0, None, probe.h, probe.theta, probe.phi, probe.psi, False, False,
                                    plane.p_t, plane.d_t, 0, 0.0, 0.0)],
            poses=[pose],
            tracker=EpisodeStateMachine(self.log_monitor, label=f"scenario {self.scenario.seed}"),
        )
        return self.observation()

    def observation(self) -> Observation:
        return assemble_state_tensor(self.state.grid_history, self.state.adj)

    def _move(self, probe: ProbeParams, action: Action) -> ProbeParams:
        dh, dtheta, dphi, dpsi = self.steps.delta(action)
        return ProbeParams(self.frame.clamp_h(probe.h + dh), canonical_theta(probe.theta + dtheta),
                           probe.phi + dphi, probe.psi + dpsi)

    def step(self, action: Union[Action, int]) -> StepResult:
        state = self.state
        if state is None or state.done:
            raise SteppedDone("step called on a finished or unstarted episode")
        action = Action(int(action))
        params = self.reward

        if action is Action.SWITCH:
            state.adj = not state.adj
            probe, pose = state.probe, state.pose
            angle = self.place_probe(probe)[1]
        else:
            probe = self._move(state.probe, action)
            try:
                pose, angle = self.place_probe(probe)
            except NoContact:
                # no skin below the new (h, theta): the probe stays put
                probe, pose = state.probe, state.pose
                angle = self.place_probe(probe)[1]

        plane = self._render(pose, state.coverage_mask)
        examining = action is not Action.SWITCH and not state.adj
        n_t = 0
        if action is Action.SWITCH:
            reward = params.switch_penalty
        elif state.adj:
            reward = 0.0
        elif params.shadow_gated(plane.p_t):
            reward = params.shadow_penalty
        else:
            n_t = plane.n_t
            reward = params.step_reward(n_t, self.total_target, plane.d_t, self.radius, plane.p_t)
            state.coverage_mask |= plane.covered_target

        state.probe, state.pose = probe, pose
        state.step_count += 1
        covered_fraction = float(state.coverage_mask.sum()) / self.total_target

        record = StepRecord(state.step_count, int(action), probe.h, probe.theta, probe.phi, probe.psi,
                            state.adj, examining, plane.p_t, plane.d_t, n_t, 0.0, covered_fraction)
        state.episode_log.append(record)
        state.poses.append(pose)

        if angle > params.max_angle:
            state.tracker.transition(EpisodeOutcome.ANGLE_ABORT, state.step_count,
                                     f"centerline at {angle:.1f} deg to the skin normal")
        elif n_t > 0 and covered_fraction >= params.success_fraction:
            examined = [r for r in state.episode_log if r.examining]
            bonus = params.end_reward([r.d_t for r in examined], [r.p_t for r in examined], self.radius)
            reward = bonus if params.end_bonus_replaces_step else reward + bonus
            state.tracker.transition(EpisodeOutcome.SUCCESS, state.step_count,
                                     f"coverage {covered_fraction:.3f}")
        elif state.step_count >= params.max_steps:
            state.tracker.transition(EpisodeOutcome.STEP_LIMIT, state.step_count)

        record.reward = float(reward)
        state.grid_history.append(self.grid.data.copy())
        return StepResult(self.observation(), float(reward), state.done, state.outcome,
                          StepInfo(plane.p_t, plane.d_t, n_t, covered_fraction, angle))

    def metrics(self) -> EpisodeMetrics:
        if self.state is None:
            raise EmptyEpisode("no episode has been run")
        return episode_metrics(self.state.episode_log, self.radius, self.state.outcome)

    def trajectory(self) -> List[Pose]:
        """Poses after each action, starting with the reset pose"""
        return list(self.state.poses) if self.state else []

