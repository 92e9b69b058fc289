"""
Actor/learner training: seed derivation, learner bookkeeping, determinism and resume
"""

import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from actor_learner import (Learner, NodeTopology, WeightChannel, WeightSnapshot, episode_rng, eval_seed,
                           replay_sidecar, run_training, scenario_seed, splitmix64)
from checkpoint_store import read_checkpoint
from dqn_agent import build_train_state
from errors import ChannelClosed, InvalidParams
from replay_buffer import PrioritizedBuffer, Transition
from scan_environment import Observation


def test_splitmix64_reference_value():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_training_and_held_out_seeds_are_disjoint():
    train = {scenario_seed(7, node, i) for node in range(4) for i in range(200)}
    held_out = {eval_seed(7, i) for i in range(200)}
    assert all(s % 2 == 0 for s in train)
    assert all(s % 2 == 1 for s in held_out)
    assert len(held_out) == 200
    assert scenario_seed(7, 1, 3) == scenario_seed(7, 1, 3)
    assert scenario_seed(7, 1, 3) != scenario_seed(8, 1, 3)


def test_episode_rng_streams():
    a = episode_rng(11, 2).random(4)
    assert np.array_equal(a, episode_rng(11, 2).random(4))
    assert not np.array_equal(a, episode_rng(11, 3).random(4))


def test_weight_channel_keeps_latest():
    channel = WeightChannel()
    assert channel.poll() is None
    channel.publish(WeightSnapshot(1, {}))
    channel.publish(WeightSnapshot(2, {}))
    assert channel.poll().step == 2
    assert channel.poll() is None
    channel.close()
    with pytest.raises(ChannelClosed):
        channel.poll()


@pytest.mark.parametrize("kwargs", [{"n_actors": 0}, {"queue_bound": 0}, {"broadcast_every": 0}])
def test_topology_validation(kwargs):
    with pytest.raises(InvalidParams):
        NodeTopology(**kwargs)


def _transitions(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        obs = Observation((rng.random((9, 6, 6, 6)) < 0.3).astype(np.uint8), 0.0)
        nxt = Observation((rng.random((9, 6, 6, 6)) < 0.3).astype(np.uint8), 1.0)
        out.append(Transition.from_step(obs, i % 9, float(rng.normal()), nxt, i % 5 == 4))
    return out


def _learner(config, log_monitor=None):
    state = build_train_state(config, 6, seed=0)
    buffer = PrioritizedBuffer(config.replay_capacity, config.priority_alpha, config.priority_eps)
    return Learner(config, NodeTopology(broadcast_every=3), state, buffer, log_monitor)


def test_learner_trains_after_warmup_and_syncs(tiny_agent):
    learner = _learner(tiny_agent)
    channel = WeightChannel()
    learner.channels.append(channel)
    for t in _transitions(10):
        learner.ingest(t)
    assert learner.step == learner.received == 10
    # updates at steps 4..10
    assert learner.state.updates == 7
    for a, b in zip(learner.state.online.parameters(), learner.state.target.parameters()):
        assert torch.equal(a, b)
    snapshot = channel.poll()
    assert snapshot is not None and snapshot.step == 9


def test_target_sync_cadence(tiny_agent, log_monitor):
    learner = _learner(tiny_agent, log_monitor)
    for t in _transitions(23):
        learner.ingest(t)
    every = tiny_agent.target_sync_every
    assert log_monitor.metrics.get_metrics()["target_syncs"] == list(range(every, 24, every))


def test_learner_ingest_without_training(tiny_agent):
    learner = _learner(tiny_agent)
    for t in _transitions(8):
        learner.ingest(t, train=False)
    assert learner.state.updates == 0
    assert len(learner.buffer) == 8


def test_zero_steps_writes_initial_checkpoint(fast_toy, tmp_path):
    config = replace(fast_toy, agent=replace(fast_toy.agent, total_steps=0))
    result = run_training(config, tmp_path / "zero")
    assert result.global_step == 0 and result.episodes == 0
    assert len(result.checkpoints) == 1
    meta, _ = read_checkpoint(result.final_checkpoint)
    assert meta["step"] == 0
    assert replay_sidecar(result.final_checkpoint).exists()
    with open(tmp_path / "zero" / "episodes.csv", newline="", encoding="utf-8") as f:
        assert len(list(csv.reader(f))) == 1


def test_deterministic_training_and_exact_resume(fast_toy, tmp_path):
    first = run_training(fast_toy, tmp_path / "a")
    second = run_training(fast_toy, tmp_path / "b")
    final_bytes = open(first.final_checkpoint, "rb").read()
    assert first.global_step >= fast_toy.agent.total_steps
    assert first.received == first.produced == first.global_step
    assert final_bytes == open(second.final_checkpoint, "rb").read()

    resumed = run_training(fast_toy, tmp_path / "c", resume=first.checkpoints[-2])
    assert resumed.global_step == first.global_step
    assert resumed.episodes == first.episodes
    assert open(resumed.final_checkpoint, "rb").read() == final_bytes


def test_resume_rejects_changed_agent(fast_toy, tmp_path):
    first = run_training(replace(fast_toy, agent=replace(fast_toy.agent, total_steps=0)), tmp_path / "a")
    changed = replace(fast_toy, agent=replace(fast_toy.agent, hidden=16))
    with pytest.raises(InvalidParams):
        run_training(changed, tmp_path / "b", resume=first.final_checkpoint)


def test_threaded_actors_lose_no_transitions(fast_toy, tmp_path, log_monitor):
    topology = replace(fast_toy.topology, n_actors=2, deterministic=False, queue_bound=2, local_capacity=16)
    agent = replace(fast_toy.agent, total_steps=60)
    result = run_training(replace(fast_toy, topology=topology, agent=agent), tmp_path / "threads",
                          log_monitor=log_monitor)
    assert result.received == result.produced
    assert result.global_step == result.received
    assert result.global_step >= 60
