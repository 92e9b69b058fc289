"""
Actor/learner training topology

Actors own environments and local FIFO staging buffers and flush whole
chunks of transitions to a bounded learner queue. A single learner owns the
global prioritized buffer and the only writable network, and publishes
weight snapshots back to the actors.
"""

import csv
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Union

import numpy as np
import torch

from checkpoint_store import CheckpointStore, load_checkpoint
from dqn_agent import (AgentConfig, TrainState, beta_at, build_network, build_train_state, epsilon_at,
                       q_values, select_action, sync_target, train_batch)
from errors import ChannelClosed, EmptyEpisode, InvalidParams, PlacementFailed, ResetFailed
from replay_buffer import PrioritizedBuffer, Transition
from retry_strategies import RetryManager
from scan_environment import N_ACTIONS, ScanEnvironment
from scene import build_scenario

if TYPE_CHECKING:
    from settings_manager import RunConfig

MASK64 = (1 << 64) - 1
EVAL_STREAM = 1 << 32
EPISODE_COLUMNS = ["node", "episode", "scenario_seed", "steps", "return", "outcome", "coverage",
                   "P", "D", "epsilon", "global_step"]


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def node_seed(master_seed: int, node_id: int) -> int:
    return splitmix64((master_seed & MASK64) ^ splitmix64(node_id))


def scenario_seed(master_seed: int, node_id: int, index: int, held_out: bool = False) -> int:
    """Training scenarios get even seeds and held-out scenarios odd ones"""
    mixed = splitmix64((node_seed(master_seed, node_id) + index) & MASK64) >> 1
    return (mixed << 1) | int(held_out)


def eval_seed(master_seed: int, index: int) -> int:
    return scenario_seed(master_seed, EVAL_STREAM, index, held_out=True)


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, episode]))


@dataclass
class NodeTopology:
    n_actors: int = 4
    local_capacity: int = 5000
    queue_bound: int = 64
    broadcast_every: int = 400
    deterministic: bool = False
    episodes_per_scenario: int = 1

    def __post_init__(self):
        for name in ("n_actors", "local_capacity", "queue_bound", "broadcast_every", "episodes_per_scenario"):
            if getattr(self, name) < 1:
                raise InvalidParams(f"{name} must be at least 1")


def make_environment(run_config: "RunConfig", seed: int, retry_manager: Optional[RetryManager] = None,
                     log_monitor: Optional[Any] = None) -> ScanEnvironment:
    logger = log_monitor.logger if log_monitor else None
    scenario = build_scenario(run_config.scenario, seed, retry_manager, logger)
    return ScanEnvironment(scenario, run_config.reward, run_config.probe, run_config.steps,
                           retry_manager, log_monitor)


@dataclass
class WeightSnapshot:
    step: int
    weights: Dict[str, torch.Tensor]


class WeightChannel:
    """Holds at most the latest snapshot; publishing replaces an unread one"""

    def __init__(self):
        self._queue: queue.Queue = queue.Queue(maxsize=1)
        self._closed = threading.Event()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def publish(self, snapshot: WeightSnapshot) -> None:
        while True:
            try:
                self._queue.put_nowait(snapshot)
                return
            except queue.Full:
                try:
                    self._queue.get_nowait()
                except queue.Empty:
                    pass

    def poll(self) -> Optional[WeightSnapshot]:
        if self.closed:
            raise ChannelClosed("weight channel closed")
        try:
            return self._queue.get_nowait()
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()


@dataclass
class EpisodeSummary:
    node: int
    episode: int
    scenario_seed: int
    steps: int
    episode_return: float
    outcome: str
    coverage: float
    P: float
    D: float
    epsilon: float


@dataclass
class Chunk:
    """Transitions flushed from one actor; summary is set on the chunk that ends an episode"""
    node: int
    transitions: List[Transition]
    summary: Optional[EpisodeSummary] = None


class Actor:
    """Runs epsilon-greedy episodes against a read-only weight snapshot"""

    def __init__(self, node_id: int, run_config: "RunConfig", channel: WeightChannel,
                 out_queue: queue.Queue, grid_size: int, log_monitor: Optional[Any] = None,
                 env_factory: Optional[Callable[[int], ScanEnvironment]] = None):
        self.node_id = node_id
        self.run_config = run_config
        self.agent: AgentConfig = run_config.agent
        self.topology: NodeTopology = run_config.topology
        self.channel = channel
        self.out_queue = out_queue
        self.log_monitor = log_monitor
        self.logger = log_monitor.logger if log_monitor else None
        self.retry_manager = RetryManager(self.logger, log_monitor.metrics if log_monitor else None)
        self.env_factory = env_factory or (
            lambda seed: make_environment(run_config, seed, self.retry_manager, log_monitor))
        self.network = build_network(self.agent, grid_size)
        self.network.requires_grad_(False)
        self.seed = node_seed(run_config.master_seed, node_id)
        self.episode = 0
        self.snapshot_step = 0
        self.local_steps = 0
        self.produced = 0
        self.staging: List[Transition] = []
        self._env: Optional[ScanEnvironment] = None
        self._env_seed: Optional[int] = None

    def load_snapshot(self, snapshot: WeightSnapshot) -> None:
        self.network.load_state_dict(snapshot.weights)
        self.snapshot_step = snapshot.step
        self.local_steps = 0

    def refresh(self) -> bool:
        """Adopt the newest published snapshot; raises ChannelClosed once training stops"""
        snapshot = self.channel.poll()
        if snapshot is None:
            return False
        self.load_snapshot(snapshot)
        return True

    def epsilon(self) -> float:
        return epsilon_at(self.agent, self.snapshot_step + self.local_steps)

    def _environment(self, seed: int) -> ScanEnvironment:
        if self._env is None or self._env_seed != seed:
            self._env = self.env_factory(seed)
            self._env_seed = seed
        return self._env

    def _put(self, chunk: Chunk) -> None:
        while True:
            try:
                self.out_queue.put(chunk, timeout=0.5)
                self.produced += len(chunk.transitions)
                return
            except queue.Full:
                if self.channel.closed:
                    raise ChannelClosed("learner stopped while the queue was full")

    def flush(self, summary: Optional[EpisodeSummary] = None) -> None:
        if not self.staging and summary is None:
            return
        chunk = Chunk(self.node_id, self.staging, summary)
        self.staging = []
        self._put(chunk)

    def _stage(self, transition: Transition) -> None:
        self.staging.append(transition)
        if len(self.staging) >= self.topology.local_capacity:
            self.flush()

    def _start(self, rng: np.random.Generator):
        """Reset on the scenario for the current episode, skipping scenarios that cannot start"""
        for _ in range(10):
            seed = scenario_seed(self.run_config.master_seed, self.node_id,
                                 self.episode // self.topology.episodes_per_scenario)
            try:
                env = self._environment(seed)
                return seed, env, env.reset(rng)
            except (PlacementFailed, ResetFailed) as e:
                if self.logger:
                    self.logger.warning(f"actor {self.node_id} skipping episode {self.episode}: {e}")
                self.episode += 1
        raise ResetFailed(f"actor {self.node_id}: ten consecutive scenarios failed to start")

    def run_episode(self) -> EpisodeSummary:
        rng = episode_rng(self.seed, self.episode)
        seed, env, observation = self._start(rng)
        total, epsilon = 0.0, self.epsilon()
        while True:
            epsilon = self.epsilon()
            q = np.zeros(N_ACTIONS) if epsilon >= 1.0 else q_values(self.network, observation)
            action = select_action(q, epsilon, rng)
            result = env.step(action)
            self._stage(Transition.from_step(observation, action, result.reward,
                                             result.observation, result.done))
            self.local_steps += 1
            total += result.reward
            observation = result.observation
            if result.done:
                break

        try:
            metrics = env.metrics()
            P, D = metrics.P, metrics.D
        except EmptyEpisode:
            P = D = float("nan")
        summary = EpisodeSummary(self.node_id, self.episode, seed, env.state.step_count, total,
                                 env.state.outcome.value, result.info.coverage_fraction, P, D, epsilon)
        self.episode += 1
        self.flush(summary)
        return summary

    def run(self) -> None:
        """Thread body: episodes until the weight channel closes"""
        try:
            while True:
                self.refresh()
                self.run_episode()
        except ChannelClosed:
            if self.logger:
                self.logger.debug(f"actor {self.node_id} stopped after {self.episode} episodes")

    def export_state(self) -> Dict[str, Any]:
        return {'node': self.node_id, 'episode': self.episode, 'snapshot_step': self.snapshot_step,
                'local_steps': self.local_steps, 'produced': self.produced}

    def restore_state(self, data: Dict[str, Any], weights: Optional[Dict[str, torch.Tensor]]) -> None:
        if weights:
            self.network.load_state_dict(weights)
        self.episode = int(data['episode'])
        self.snapshot_step = int(data['snapshot_step'])
        self.local_steps = int(data['local_steps'])
        self.produced = int(data['produced'])


class Learner:
    """Owns the replay buffer and the online/target networks; global step counts ingested transitions"""

    def __init__(self, config: AgentConfig, topology: NodeTopology, state: TrainState,
                 buffer: PrioritizedBuffer, log_monitor: Optional[Any] = None):
        self.config = config
        self.topology = topology
        self.state = state
        self.buffer = buffer
        self.log_monitor = log_monitor
        self.logger = log_monitor.logger if log_monitor else None
        self.metrics = log_monitor.metrics if log_monitor else None
        self.channels: List[WeightChannel] = []
        self.received = 0

    @property
    def step(self) -> int:
        return self.state.step

    def snapshot(self) -> WeightSnapshot:
        weights = {k: v.detach().clone() for k, v in self.state.online.state_dict().items()}
        return WeightSnapshot(self.state.step, weights)

    def broadcast(self) -> None:
        snapshot = self.snapshot()
        for channel in self.channels:
            channel.publish(snapshot)

    def ingest(self, transition: Transition, train: bool = True) -> None:
        self.buffer.push(transition)
        self.received += 1
        self.state.step += 1
        step = self.state.step
        if not train or step > self.config.total_steps:
            return
        if step >= self.config.learn_start and len(self.buffer) >= self.config.batch_size \
                and step % self.config.train_every == 0:
            self.train_step()
        if step % self.config.target_sync_every == 0:
            sync_target(self.state)
            if self.metrics:
                self.metrics.record_target_sync(step)
            if self.logger:
                self.logger.info(f"target network synced at step {step}")

    def train_step(self) -> float:
        beta = beta_at(self.config, self.state.step)
        sampled = self.buffer.sample(self.config.batch_size, beta, self.state.rng)
        loss, td = train_batch(self.state, sampled.to_batch(), self.config.discount)
        self.buffer.update_priorities(sampled.indices, td, sampled.stamps)
        if self.metrics:
            self.metrics.record_loss(loss, td.tolist())
        if self.log_monitor and self.state.updates % 1000 == 0:
            self.log_monitor.log_training(self.state.step, loss,
                                          f"update {self.state.updates}: loss={loss:.6f} beta={beta:.3f}")
        if self.state.updates % self.topology.broadcast_every == 0:
            self.broadcast()
        return loss


@dataclass
class TrainingResult:
    run_dir: str
    final_checkpoint: str
    global_step: int
    episodes: int
    received: int
    produced: int
    checkpoints: List[str] = field(default_factory=list)


def replay_sidecar(checkpoint: Union[str, Path]) -> Path:
    return Path(str(checkpoint) + ".replay.npz")


class Trainer:
    """Drives actors and the learner, writes the episode log and checkpoints"""

    def __init__(self, run_config: "RunConfig", run_dir: Union[str, Path], log_monitor: Optional[Any] = None,
                 progress: Optional[Callable[[int, int], None]] = None):
        self.run_config = run_config
        self.config: AgentConfig = run_config.agent
        self.topology: NodeTopology = run_config.topology
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log_monitor = log_monitor
        self.logger = log_monitor.logger if log_monitor else None
        self.progress = progress
        self.grid_size = run_config.scenario.grid_dims[0]
        self.store = CheckpointStore(str(self.run_dir / "checkpoints"), self.logger)
        self.episodes_csv = self.run_dir / "episodes.csv"
        self.episodes_done = 0
        self.next_checkpoint = self.config.checkpoint_every
        self.checkpoints: List[str] = []
        self.out_queue: queue.Queue = queue.Queue(maxsize=0 if self.topology.deterministic
                                                  else self.topology.queue_bound)
        self.learner: Optional[Learner] = None
        self.actors: List[Actor] = []

    def _build(self, state: TrainState, buffer: PrioritizedBuffer) -> None:
        self.learner = Learner(self.config, self.topology, state, buffer, self.log_monitor)
        self.actors = []
        for node_id in range(self.topology.n_actors):
            channel = WeightChannel()
            self.learner.channels.append(channel)
            self.actors.append(Actor(node_id, self.run_config, channel, self.out_queue, self.grid_size,
                                     self.log_monitor))

    def start_fresh(self) -> None:
        state = build_train_state(self.config, self.grid_size, node_seed(self.run_config.master_seed, MASK64))
        metrics = self.log_monitor.metrics if self.log_monitor else None
        buffer = PrioritizedBuffer(self.config.replay_capacity, self.config.priority_alpha,
                                   self.config.priority_eps, self.logger, metrics)
        self._build(state, buffer)
        initial = self.learner.snapshot()
        for actor in self.actors:
            actor.load_snapshot(initial)
        with open(self.episodes_csv, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(EPISODE_COLUMNS)
        self._checkpoint()

    def resume(self, checkpoint: Union[str, Path]) -> None:
        state, config, extra, arrays = load_checkpoint(checkpoint)
        # total_steps may grow on resume; everything else must match
        if replace(config, total_steps=self.config.total_steps) != self.config:
            raise InvalidParams(f"{checkpoint} was written with a different agent configuration")
        metrics = self.log_monitor.metrics if self.log_monitor else None
        buffer = PrioritizedBuffer.load(replay_sidecar(checkpoint), self.logger, metrics)
        self._build(state, buffer)
        self.learner.received = int(extra['received'])
        self.episodes_done = int(extra['episodes_done'])
        self.next_checkpoint = int(extra['next_checkpoint'])
        for actor, saved in zip(self.actors, extra['actors']):
            prefix = f"actor{actor.node_id}."
            weights = {name[len(prefix):]: torch.from_numpy(a.astype(np.float32))
                       for name, a in arrays.items() if name.startswith(prefix)}
            actor.restore_state(saved, weights)
        self._truncate_episode_log(self.episodes_done)
        if self.logger:
            self.logger.info(f"Resumed from {checkpoint} at step {state.step} "
                             f"({self.episodes_done} episodes)")

    def _truncate_episode_log(self, rows: int) -> None:
        lines = []
        if self.episodes_csv.exists():
            lines = self.episodes_csv.read_text(encoding="utf-8").splitlines()[:rows + 1]
        if not lines:
            lines = [",".join(EPISODE_COLUMNS)]
        self.episodes_csv.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def _checkpoint(self, name: Optional[str] = None) -> str:
        extra_arrays = {f"actor{a.node_id}": a.network.state_dict() for a in self.actors}
        metadata = {
            'run_id': self.run_config.run_id,
            'master_seed': self.run_config.master_seed,
            'episodes_done': self.episodes_done,
            'received': self.learner.received,
            'next_checkpoint': self.next_checkpoint,
            'actors': [a.export_state() for a in self.actors],
        }
        path = self.store.save(self.learner.state, self.config, self.grid_size, name, metadata, extra_arrays)
        self.learner.buffer.save(replay_sidecar(path))
        self.checkpoints.append(path)
        return path

    def _record_episode(self, summary: EpisodeSummary) -> None:
        self.episodes_done += 1
        with open(self.episodes_csv, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow([
                summary.node, summary.episode, summary.scenario_seed, summary.steps,
                f"{summary.episode_return:.9g}", summary.outcome, f"{summary.coverage:.6f}",
                f"{summary.P:.6f}", f"{summary.D:.6f}", f"{summary.epsilon:.6f}", self.learner.step,
            ])
        if self.log_monitor:
            self.log_monitor.log_episode(summary.node, summary.episode, summary.steps,
                                         summary.episode_return, summary.outcome, summary.coverage)
        if self.progress:
            self.progress(min(self.learner.step, self.config.total_steps), self.config.total_steps)

    def _ingest(self, chunk: Chunk, train: bool = True) -> None:
        for transition in chunk.transitions:
            self.learner.ingest(transition, train)
        if self.log_monitor:
            self.log_monitor.metrics.record_queue_depth(chunk.node, self.out_queue.qsize())
        if chunk.summary is not None:
            self._record_episode(chunk.summary)

    def _maybe_checkpoint(self) -> None:
        if self.learner.step >= self.next_checkpoint:
            every = self.config.checkpoint_every
            self.next_checkpoint = (self.learner.step // every + 1) * every
            self._checkpoint()

    def _drain(self, train: bool) -> None:
        while True:
            try:
                chunk = self.out_queue.get_nowait()
            except queue.Empty:
                return
            self._ingest(chunk, train)

    def _run_deterministic(self) -> None:
        """Actors take turns in this thread, one episode each"""
        while self.learner.step < self.config.total_steps:
            actor = self.actors[self.episodes_done % len(self.actors)]
            actor.run_episode()
            self._drain(train=True)
            actor.refresh()
            self._maybe_checkpoint()

    def _run_threaded(self) -> None:
        errors: List[BaseException] = []

        def body(actor: Actor) -> None:
            try:
                actor.run()
            except BaseException as e:
                errors.append(e)
                if self.log_monitor:
                    self.log_monitor.log_exception(e, f"actor {actor.node_id}")

        threads = [threading.Thread(target=body, args=(a,), name=f"actor-{a.node_id}", daemon=True)
                   for a in self.actors]
        for t in threads:
            t.start()
        try:
            while self.learner.step < self.config.total_steps:
                if errors:
                    raise errors[0]
                try:
                    chunk = self.out_queue.get(timeout=0.5)
                except queue.Empty:
                    continue
                self._ingest(chunk)
                if chunk.summary is not None:
                    self._maybe_checkpoint()
        finally:
            for channel in self.learner.channels:
                channel.close()
            # actors blocked on a full queue need it drained to notice the close
            while any(t.is_alive() for t in threads):
                self._drain(train=False)
                for t in threads:
                    t.join(timeout=0.1)
            self._drain(train=False)

    def run(self) -> TrainingResult:
        start = time.time()
        if self.learner.step < self.config.total_steps:
            if self.topology.deterministic:
                self._run_deterministic()
            else:
                self._run_threaded()
        final = str(self.store.path_for(self.learner.step))
        if not self.checkpoints or self.checkpoints[-1] != final:
            final = self._checkpoint()
        produced = sum(a.produced for a in self.actors)
        if self.log_monitor:
            self.log_monitor.log_operation('train', f"Training finished at step {self.learner.step}: "
                                           f"{self.episodes_done} episodes, {self.learner.received} "
                                           f"transitions received, {produced} produced",
                                           duration=time.time() - start)
        return TrainingResult(str(self.run_dir), final, self.learner.step, self.episodes_done,
                              self.learner.received, produced, list(self.checkpoints))


def run_training(run_config: "RunConfig", run_dir: Optional[Union[str, Path]] = None,
                 resume: Optional[Union[str, Path]] = None, log_monitor: Optional[Any] = None,
                 progress: Optional[Callable[[int, int], None]] = None) -> TrainingResult:
    """Train from scratch or from a checkpoint; total_steps = 0 writes only the initial checkpoint"""
    run_dir = Path(run_dir) if run_dir else Path(run_config.output_dir) / run_config.run_id
    trainer = Trainer(run_config, run_dir, log_monitor, progress)
    if resume:
        trainer.resume(resume)
    else:
        trainer.start_fresh()
    return trainer.run()
