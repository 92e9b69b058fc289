"""
Prioritized experience replay backed by a sum tree
"""

import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from numpy.typing import NDArray

from dqn_agent import Batch
from errors import CorruptFile, StaleIndex, Underfilled
from scan_environment import Observation


class SumTree:
    """Binary tree over a power-of-two leaf array; each parent is recomputed from its children"""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.size = 1
        while self.size < capacity:
            self.size *= 2
        self.tree = np.zeros(2 * self.size, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def get(self, index: int) -> float:
        return float(self.tree[self.size + index])

    def leaves(self) -> NDArray[np.float64]:
        return self.tree[self.size:self.size + self.capacity].copy()

    def update(self, index: int, value: float) -> None:
        if not 0 <= index < self.capacity:
            raise IndexError(f"leaf {index} outside capacity {self.capacity}")
        i = index + self.size
        self.tree[i] = value
        i //= 2
        while i >= 1:
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
            i //= 2

    def rebuild(self, leaves: NDArray[np.float64]) -> None:
        self.tree[:] = 0.0
        self.tree[self.size:self.size + len(leaves)] = leaves
        for i in range(self.size - 1, 0, -1):
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]

    def find(self, prefix: float) -> int:
        """Leaf whose cumulative interval contains prefix; never a zero-priority leaf"""
        i = 1
        while i < self.size:
            left = self.tree[2 * i]
            if prefix < left or self.tree[2 * i + 1] <= 0.0:
                i = 2 * i
            else:
                prefix -= left
                i = 2 * i + 1
        return i - self.size


@dataclass
class Transition:
    """(s, a, r, s', done) with the binary voxel states bit-packed"""
    state_bits: NDArray[np.uint8]
    mode: float
    action: int
    reward: float
    next_state_bits: NDArray[np.uint8]
    next_mode: float
    done: bool
    shape: Tuple[int, ...]

    @classmethod
    def from_step(cls, observation: Observation, action: int, reward: float,
                  next_observation: Observation, done: bool) -> "Transition":
        if not np.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        if observation.voxels.shape != next_observation.voxels.shape:
            raise ValueError("state and next state shapes differ")
        return cls(np.packbits(observation.voxels.ravel()), float(observation.mode), int(action),
                   float(reward), np.packbits(next_observation.voxels.ravel()),
                   float(next_observation.mode), bool(done), tuple(observation.voxels.shape))

    def _unpack(self, bits: NDArray[np.uint8]) -> NDArray[np.uint8]:
        count = int(np.prod(self.shape))
        return np.unpackbits(bits, count=count).reshape(self.shape)

    def state(self) -> Observation:
        return Observation(self._unpack(self.state_bits), self.mode)

    def next_state(self) -> Observation:
        return Observation(self._unpack(self.next_state_bits), self.next_mode)


@dataclass
class SampledBatch:
    transitions: List[Transition]
    weights: NDArray[np.float64]
    indices: NDArray[np.int64]
    stamps: NDArray[np.int64]

    def to_batch(self) -> Batch:
        states = [t.state() for t in self.transitions]
        next_states = [t.next_state() for t in self.transitions]
        return Batch(
            voxels=torch.from_numpy(np.stack([s.voxels for s in states]).astype(np.float32)),
            modes=torch.tensor([s.mode for s in states], dtype=torch.float32),
            actions=torch.tensor([t.action for t in self.transitions], dtype=torch.int64),
            rewards=torch.tensor([t.reward for t in self.transitions], dtype=torch.float32),
            next_voxels=torch.from_numpy(np.stack([s.voxels for s in next_states]).astype(np.float32)),
            next_modes=torch.tensor([s.mode for s in next_states], dtype=torch.float32),
            dones=torch.tensor([float(t.done) for t in self.transitions], dtype=torch.float32),
            weights=torch.from_numpy(self.weights.astype(np.float32)),
        )


class PrioritizedBuffer:
    """
    FIFO ring of transitions with sampling probability proportional to
    p_i ** alpha. Every slot carries an insertion stamp so priority updates
    for slots overwritten since sampling are detected and skipped.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, eps: float = 1e-6,
                 logger: Optional[Any] = None, metrics: Optional[Any] = None):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.storage: List[Optional[Transition]] = [None] * capacity
        self.stamps = np.full(capacity, -1, dtype=np.int64)
        self.next_slot = 0
        self.count = 0
        self.pushed = 0
        self.max_priority = 1.0
        self.stale_skips = 0
        self.logger = logger
        self.metrics = metrics

    def __len__(self) -> int:
        return self.count

    def _stored(self, priority: float) -> float:
        return max(priority, self.eps) ** self.alpha

    def push(self, transition: Transition, priority: Optional[float] = None) -> int:
        """Store with the given priority, or the largest seen so far; returns the slot"""
        if priority is None:
            priority = self.max_priority
        if priority < 0:
            raise ValueError(f"priority must be non-negative, got {priority}")
        slot = self.next_slot
        self.storage[slot] = transition
        self.stamps[slot] = self.pushed
        self.tree.update(slot, self._stored(priority))
        self.max_priority = max(self.max_priority, priority)
        self.pushed += 1
        self.next_slot = (slot + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        return slot

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator) -> SampledBatch:
        """Stratified proportional sampling with max-normalized importance weights"""
        if batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.count < batch_size:
            raise Underfilled(f"buffer holds {self.count} transitions, batch needs {batch_size}")
        total = self.tree.total
        segment = total / batch_size
        indices = np.empty(batch_size, dtype=np.int64)
        for i in range(batch_size):
            prefix = rng.uniform(i * segment, (i + 1) * segment)
            indices[i] = self.tree.find(min(prefix, np.nextafter(total, 0.0)))
        priorities = np.array([self.tree.get(int(i)) for i in indices])
        probabilities = priorities / total
        weights = (self.count * probabilities) ** (-beta)
        weights /= weights.max()
        return SampledBatch([self.storage[int(i)] for i in indices], weights, indices,
                            self.stamps[indices].copy())

    def update_priorities(self, indices: Sequence[int], td_errors: Sequence[float],
                          stamps: Optional[Sequence[int]] = None, strict: bool = False) -> int:
        """
        Set p_i = |td_i| + eps. Slots overwritten since sampling are skipped
        (or raise StaleIndex when strict). Returns the number skipped.
        """
        skipped = 0
        for k, (index, td) in enumerate(zip(indices, td_errors)):
            index = int(index)
            if stamps is not None and self.stamps[index] != stamps[k]:
                if strict:
                    raise StaleIndex(f"slot {index} was overwritten since sampling")
                skipped += 1
                continue
            priority = abs(float(td)) + self.eps
            self.tree.update(index, self._stored(priority))
            self.max_priority = max(self.max_priority, priority)
        if skipped:
            self.stale_skips += skipped
            if self.metrics:
                self.metrics.record_stale_skips(skipped)
            if self.logger:
                self.logger.debug(f"skipped {skipped} stale priority update(s)")
        return skipped

    def linear_total(self) -> float:
        """Direct sum over the leaves, for checking the tree root"""
        return float(self.tree.leaves().sum())

    def save(self, path: Union[str, Path]) -> str:
        """Write the buffer to an .npz sidecar"""
        live = [t for t in self.storage if t is not None]
        shape = live[0].shape if live else (0,)
        nbytes = len(live[0].state_bits) if live else 0
        states = np.zeros((self.capacity, nbytes), dtype=np.uint8)
        next_states = np.zeros((self.capacity, nbytes), dtype=np.uint8)
        scalars = np.zeros((self.capacity, 5), dtype=np.float64)
        occupied = np.zeros(self.capacity, dtype=bool)
        for slot, t in enumerate(self.storage):
            if t is None:
                continue
            occupied[slot] = True
            states[slot] = t.state_bits
            next_states[slot] = t.next_state_bits
            scalars[slot] = (t.mode, t.action, t.reward, t.next_mode, float(t.done))
        counters = np.array([self.capacity, self.next_slot, self.count, self.pushed, self.stale_skips],
                            dtype=np.int64)
        with open(path, "wb") as f:
            np.savez(f, states=states, next_states=next_states, scalars=scalars, occupied=occupied,
                     stamps=self.stamps, leaves=self.tree.leaves(), counters=counters,
                     shape=np.asarray(shape, dtype=np.int64),
                     params=np.array([self.alpha, self.eps, self.max_priority]))
        return str(path)

    @classmethod
    def load(cls, path: Union[str, Path], logger: Optional[Any] = None,
             metrics: Optional[Any] = None) -> "PrioritizedBuffer":
        try:
            with np.load(path) as data:
                capacity, next_slot, count, pushed, stale = (int(v) for v in data["counters"])
                alpha, eps, max_priority = (float(v) for v in data["params"])
                buffer = cls(capacity, alpha, eps, logger, metrics)
                shape = tuple(int(v) for v in data["shape"])
                states, next_states = data["states"], data["next_states"]
                scalars, occupied = data["scalars"], data["occupied"]
                for slot in np.nonzero(occupied)[0]:
                    mode, action, reward, next_mode, done = scalars[slot]
                    buffer.storage[slot] = Transition(states[slot].copy(), float(mode), int(action),
                                                      float(reward), next_states[slot].copy(),
                                                      float(next_mode), bool(done), shape)
                buffer.stamps = data["stamps"].astype(np.int64)
                buffer.tree.rebuild(data["leaves"])
        except (KeyError, ValueError, EOFError, zipfile.BadZipFile) as e:
            raise CorruptFile(f"{path}: unreadable replay sidecar ({e})")
        buffer.next_slot, buffer.count, buffer.pushed = next_slot, count, pushed
        buffer.stale_skips, buffer.max_priority = stale, max_priority
        return buffer
