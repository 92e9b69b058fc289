"""
Double DQN learning rule: exploration schedule, TD targets, weighted updates and target sync
"""

import copy
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from numpy.typing import NDArray

from errors import InvalidParams, NonFiniteLoss
from q_network import QNetwork
from scan_environment import N_ACTIONS, Observation


@dataclass
class AgentConfig:
    learning_rate: float = 7e-5
    discount: float = 0.99
    target_sync_every: int = 5000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 3_000_000
    batch_size: int = 32
    total_steps: int = 5_000_000
    optimizer: str = "sgd"
    beta_start: float = 0.4
    beta_end: float = 1.0
    learn_start: int = 1000
    train_every: int = 1
    replay_capacity: int = 100_000
    priority_alpha: float = 0.6
    priority_eps: float = 1e-6
    conv_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    hidden: int = 256
    checkpoint_every: int = 50_000
    network_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.discount < 1.0:
            raise InvalidParams(f"discount must lie in (0, 1), got {self.discount}")
        if not 0.05 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise InvalidParams("epsilon schedule must satisfy 0.05 <= end <= start <= 1")
        if not self.learning_rate > 0:
            raise InvalidParams("learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidParams(f"unknown optimizer {self.optimizer}")
        for name in ("target_sync_every", "batch_size", "train_every", "replay_capacity",
                     "epsilon_decay_steps", "checkpoint_every", "hidden"):
            if getattr(self, name) < 1:
                raise InvalidParams(f"{name} must be at least 1")
        if self.total_steps < 0 or self.learn_start < 0:
            raise InvalidParams("step counts must be non-negative")
        if self.replay_capacity < self.batch_size:
            raise InvalidParams("replay capacity must hold at least one batch")
        if not self.conv_channels:
            raise InvalidParams("need at least one conv block")


@dataclass
class TrainState:
    online: QNetwork
    target: QNetwork
    optimizer: torch.optim.Optimizer
    step: int
    rng: np.random.Generator
    updates: int = 0


def build_network(config: AgentConfig, grid_size: int) -> QNetwork:
    return QNetwork(grid_size, config.conv_channels, config.hidden, N_ACTIONS, config.network_seed)


def make_optimizer(config: AgentConfig, net: QNetwork) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(net.parameters(), lr=config.learning_rate)


def build_train_state(config: AgentConfig, grid_size: int, seed: int) -> TrainState:
    """Online and target networks start from identical seeded weights"""
    online = build_network(config, grid_size)
    target = copy.deepcopy(online)
    target.requires_grad_(False)
    return TrainState(online, target, make_optimizer(config, online), 0, np.random.default_rng(seed))


def epsilon_at(config: AgentConfig, step: int) -> float:
    frac = min(max(step, 0) / config.epsilon_decay_steps, 1.0)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def beta_at(config: AgentConfig, step: int) -> float:
    frac = min(max(step, 0) / max(config.total_steps, 1), 1.0)
    return config.beta_start + frac * (config.beta_end - config.beta_start)


def select_action(q_values: Sequence[float], epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index"""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    q = np.asarray(q_values, dtype=np.float64)
    if rng.random() < epsilon:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def stack_observations(observations: Sequence[Observation]) -> Tuple[torch.Tensor, torch.Tensor]:
    voxels = torch.from_numpy(np.stack([o.voxels for o in observations]).astype(np.float32))
    modes = torch.tensor([o.mode for o in observations], dtype=torch.float32)
    return voxels, modes


def q_values(net: QNetwork, observation: Observation) -> NDArray[np.float64]:
    voxels, modes = stack_observations([observation])
    with torch.no_grad():
        return net(voxels, modes)[0].double().numpy()


def td_targets(rewards: torch.Tensor, next_voxels: torch.Tensor, next_modes: torch.Tensor,
               dones: torch.Tensor, online: QNetwork, target: QNetwork, discount: float) -> torch.Tensor:
    """r + discount * Q_target(s', argmax_a Q_online(s', a)), or r at terminal transitions"""
    with torch.no_grad():
        best = online(next_voxels, next_modes).argmax(dim=1, keepdim=True)
        evaluated = target(next_voxels, next_modes).gather(1, best).squeeze(1)
        return rewards + discount * evaluated * (1.0 - dones)


def td_target(reward: float, next_observation: Observation, done: bool, online: QNetwork,
              target: QNetwork, discount: float) -> float:
    if done:
        return float(reward)
    voxels, modes = stack_observations([next_observation])
    dtype = next(online.parameters()).dtype
    value = td_targets(torch.tensor([reward], dtype=dtype), voxels.to(dtype), modes.to(dtype),
                       torch.zeros(1, dtype=dtype), online, target, discount)
    return float(value[0])


@dataclass
class Batch:
    voxels: torch.Tensor
    modes: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_voxels: torch.Tensor
    next_modes: torch.Tensor
    dones: torch.Tensor
    weights: torch.Tensor


def weighted_loss(state: TrainState, batch: Batch, discount: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Importance-weighted mean squared TD error and the per-sample TD errors"""
    targets = td_targets(batch.rewards, batch.next_voxels, batch.next_modes, batch.dones,
                         state.online, state.target, discount)
    predicted = state.online(batch.voxels, batch.modes).gather(1, batch.actions.view(-1, 1)).squeeze(1)
    td = targets - predicted
    return (batch.weights * td.pow(2)).mean(), td


def train_batch(state: TrainState, batch: Batch, discount: float) -> Tuple[float, NDArray[np.float64]]:
    """One gradient step; returns the loss and |TD error| per sample"""
    if batch.voxels.shape[0] == 0:
        raise ValueError("empty batch")
    state.optimizer.zero_grad()
    loss, td = weighted_loss(state, batch, discount)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()} at step {state.step}",
                            {'step': state.step, 'max_abs_td': float(td.detach().abs().max())})
    loss.backward()
    state.optimizer.step()
    state.updates += 1
    return float(loss.item()), td.detach().abs().double().numpy()


def sync_target(state: TrainState) -> None:
    state.target.load_state_dict(state.online.state_dict())
