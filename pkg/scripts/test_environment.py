"""
Scanning environment: reward branches, mode switching, termination and episode metrics
"""

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from episode_state import EpisodeOutcome, EpisodeStateMachine
from errors import EmptyEpisode, InvalidParams, SteppedDone
from scan_environment import (Action, ActionSteps, RewardParams, ScanEnvironment, StepRecord,
                              assemble_state_tensor, episode_metrics, export_trajectory_csv)


def _env(scenario, config, **reward_changes):
    reward = replace(config.reward, **reward_changes)
    return ScanEnvironment(scenario, reward, config.probe, config.steps)


def test_extreme_step_reward():
    params = RewardParams(alpha1=1.0, alpha2=0.5)
    assert params.step_reward(50, 50, 0.0, 150.0, 0.0) == pytest.approx(2.5, abs=1e-12)


def test_step_reward_terms():
    params = RewardParams(alpha1=1.0, alpha2=0.5)
    expected = 5 / 20 + math.exp(-0.5) + 0.5 * 0.8
    assert params.step_reward(5, 20, 50.0, 100.0, 0.2) == pytest.approx(expected, abs=1e-12)


def test_end_reward_literal_and_exp():
    params = RewardParams(alpha1=1.0, alpha2=0.5, k_end=10.0)
    assert params.end_reward([10.0, 20.0], [0.2, 0.4], 100.0) == pytest.approx(15.0, abs=1e-9)
    exp_params = replace(params, end_reward_distance_mode="exp")
    D = (math.exp(-0.1) + math.exp(-0.2)) / 2
    assert exp_params.end_reward([10.0, 20.0], [0.2, 0.4], 100.0) == pytest.approx(10 * (1 + D + 0.35), abs=1e-9)


def test_zero_threshold_never_gates():
    assert not RewardParams(shadow_threshold=0.0).shadow_gated(1.0)
    assert RewardParams(shadow_threshold=0.8).shadow_gated(0.8)
    assert not RewardParams(shadow_threshold=0.8).shadow_gated(0.79)


@pytest.mark.parametrize("kwargs", [
    {"alpha1": -1.0}, {"shadow_threshold": 1.5}, {"k_end": 0.0},
    {"success_fraction": 0.0}, {"end_reward_distance_mode": "log"}, {"max_steps": 0},
])
def test_reward_params_validation(kwargs):
    with pytest.raises(InvalidParams):
        RewardParams(**kwargs)


def test_action_deltas():
    steps = ActionSteps(h=4.0, theta=3.0, phi=2.0, psi=1.0)
    assert steps.delta(Action.H_MINUS) == (-4.0, 0.0, 0.0, 0.0)
    assert steps.delta(Action.THETA_PLUS) == (0.0, 3.0, 0.0, 0.0)
    assert steps.delta(Action.PSI_MINUS) == (0.0, 0.0, 0.0, -1.0)
    assert steps.delta(Action.SWITCH) == (0.0, 0.0, 0.0, 0.0)


def test_reset_observation(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config)
    obs = env.reset(np.random.default_rng(0))
    assert obs.voxels.shape == (9, 30, 30, 30)
    assert obs.mode == 0.0
    assert np.array_equal(obs.voxels[0:3], obs.voxels[3:6])
    assert np.array_equal(obs.voxels[3:6], obs.voxels[6:9])
    assert obs.voxels[2].sum() > 0


def test_step_before_reset(toy_scenario, toy_config):
    with pytest.raises(SteppedDone):
        _env(toy_scenario, toy_config).step(Action.H_PLUS)


def test_switch_then_readjust(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config)
    env.reset(np.random.default_rng(0))
    switched = env.step(Action.SWITCH)
    assert switched.reward == -1.0
    assert switched.observation.mode == 1.0
    moved = env.step(Action.H_PLUS)
    assert moved.reward == 0.0
    assert moved.info.n_t == 0
    assert env.state.coverage_mask.sum() == 0
    back = env.step(Action.SWITCH)
    assert back.reward == -1.0 and back.observation.mode == 0.0


def test_shadow_gate_penalty(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config, shadow_threshold=0.05)
    env.reset(np.random.default_rng(0))
    result = env.step(Action.PHI_PLUS)
    assert result.info.p_t >= 0.05
    assert result.reward == -0.1
    assert env.state.coverage_mask.sum() == 0


def test_examining_step_reward_matches_terms(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config, shadow_threshold=0.0)
    env.reset(np.random.default_rng(0))
    result = env.step(Action.PHI_PLUS)
    params = env.reward
    expected = params.step_reward(result.info.n_t, env.total_target, result.info.d_t, env.radius, result.info.p_t)
    assert result.reward == pytest.approx(expected, abs=1e-12)
    assert env.state.coverage_mask.sum() == result.info.n_t


def test_history_shifts(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config)
    first = env.reset(np.random.default_rng(0))
    second = env.step(Action.THETA_PLUS).observation
    assert np.array_equal(second.voxels[0:6], first.voxels[3:9])


def test_angle_limit_aborts(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config)
    env.reset(np.random.default_rng(0))
    result = None
    for _ in range(15):
        result = env.step(Action.PSI_PLUS)
        if result.done:
            break
    assert result.outcome is EpisodeOutcome.ANGLE_ABORT
    assert env.state.step_count in (10, 11)
    with pytest.raises(SteppedDone):
        env.step(Action.PSI_MINUS)


def test_step_limit(toy_scenario, toy_config):
    env = _env(toy_scenario, toy_config, max_steps=3)
    env.reset(np.random.default_rng(0))
    outcomes = [env.step(a).outcome for a in (Action.PHI_PLUS, Action.PHI_MINUS, Action.PHI_PLUS)]
    assert outcomes[:2] == [EpisodeOutcome.RUNNING, EpisodeOutcome.RUNNING]
    assert outcomes[2] is EpisodeOutcome.STEP_LIMIT


def test_episode_is_reproducible(toy_scenario, toy_config):
    def rollout():
        env = _env(toy_scenario, toy_config)
        rng = np.random.default_rng(5)
        env.reset(rng)
        rewards = []
        for _ in range(20):
            result = env.step(int(rng.integers(9)))
            rewards.append(result.reward)
            if result.done:
                break
        return rewards, [(r.h, r.theta, r.phi, r.psi) for r in env.state.episode_log]

    assert rollout() == rollout()


def test_trajectory_export(toy_scenario, toy_config, tmp_path):
    env = _env(toy_scenario, toy_config)
    env.reset(np.random.default_rng(0))
    for action in (Action.H_PLUS, Action.SWITCH, Action.THETA_MINUS):
        env.step(action)
    path = export_trajectory_csv(env.state.episode_log, env.trajectory(), tmp_path / "trajectory.csv")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "step"
    assert len(rows) - 1 == env.state.step_count == 3
    assert len(env.trajectory()) == 4


def _record(step, examining, p_t, d_t, action=0):
    return StepRecord(step, action, 0.0, 0.0, 0.0, 0.0, not examining, examining, p_t, d_t, 0, 0.0, 0.0)


def test_episode_metrics_average_examining_steps():
    log = [StepRecord(0, None, 0, 0, 0, 0, False, False, 0.9, 99.0, 0, 0.0, 0.0),
           _record(1, True, 0.2, 30.0), _record(2, False, 0.9, 90.0, action=8), _record(3, True, 0.4, 60.0)]
    metrics = episode_metrics(log, 150.0, EpisodeOutcome.SUCCESS)
    assert metrics.success
    assert metrics.steps == 3
    assert metrics.P == pytest.approx(0.7)
    assert metrics.D == pytest.approx(0.3)


def test_episode_metrics_needs_examining_steps():
    with pytest.raises(EmptyEpisode):
        episode_metrics([_record(1, False, 0.0, 1.0)], 150.0, EpisodeOutcome.STEP_LIMIT)


def test_state_tensor_needs_three_grids():
    grid = np.zeros((3, 2, 2, 2), dtype=np.uint8)
    with pytest.raises(ValueError):
        assemble_state_tensor([grid, grid], False)
    assert assemble_state_tensor([grid] * 3, True).mode == 1.0


def test_outcome_transitions_are_one_way():
    tracker = EpisodeStateMachine()
    assert tracker.transition(EpisodeOutcome.SUCCESS, 4, "coverage")
    assert not tracker.transition(EpisodeOutcome.STEP_LIMIT, 5)
    assert tracker.is_terminal_state()
    assert tracker.get_state_history()[0]['to_state'] == "success"
