"""
Dueling Q-network over the nine-channel voxel state
"""

import math
from typing import Sequence, Tuple

import torch
import torch.nn as nn

from errors import ShapeMismatch

N_ACTIONS = 9
STATE_CHANNELS = 9


class QNetwork(nn.Module):
    """
    3D conv trunk, then value and advantage streams. The mode scalar is
    appended to the flattened conv features before both streams.
    """

    def __init__(self, grid_size: int = 30, conv_channels: Sequence[int] = (16, 32, 64),
                 hidden: int = 256, n_actions: int = N_ACTIONS, seed: int = 0):
        super().__init__()
        self.grid_size = int(grid_size)
        self.conv_channels = tuple(int(c) for c in conv_channels)
        self.hidden = int(hidden)
        self.n_actions = int(n_actions)

        layers = []
        in_channels = STATE_CHANNELS
        for out_channels in self.conv_channels:
            layers += [
                nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
                nn.ReLU(),
                nn.MaxPool3d(2, ceil_mode=True),
            ]
            in_channels = out_channels
        self.conv_features = nn.Sequential(*layers)

        side = self.grid_size
        for _ in self.conv_channels:
            side = math.ceil(side / 2)
        self.feature_size = in_channels * side ** 3

        self.value_stream = nn.Sequential(
            nn.Linear(self.feature_size + 1, self.hidden),
            nn.ReLU(),
            nn.Linear(self.hidden, 1),
        )
        self.advantage_stream = nn.Sequential(
            nn.Linear(self.feature_size + 1, self.hidden),
            nn.ReLU(),
            nn.Linear(self.hidden, self.n_actions),
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, seeded"""
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv3d, nn.Linear)):
                    fan_in = module.weight[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.uniform_(-bound, bound, generator=generator)

    def architecture(self) -> dict:
        return {
            'grid_size': self.grid_size,
            'conv_channels': list(self.conv_channels),
            'hidden': self.hidden,
            'n_actions': self.n_actions,
        }

    def _check_input(self, voxels: torch.Tensor, mode: torch.Tensor) -> torch.Tensor:
        n = self.grid_size
        if voxels.dim() != 5 or tuple(voxels.shape[1:]) != (STATE_CHANNELS, n, n, n):
            raise ShapeMismatch(f"expected state of shape (B, {STATE_CHANNELS}, {n}, {n}, {n}), "
                                f"got {tuple(voxels.shape)}")
        mode = mode.reshape(-1, 1).to(voxels.dtype)
        if mode.shape[0] != voxels.shape[0]:
            raise ShapeMismatch(f"{mode.shape[0]} mode scalars for a batch of {voxels.shape[0]}")
        return mode

    def streams(self, voxels: torch.Tensor, mode: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Value (B, 1) and advantage (B, n_actions)"""
        mode = self._check_input(voxels, mode)
        features = self.conv_features(voxels).flatten(start_dim=1)
        features = torch.cat([features, mode], dim=1)
        return self.value_stream(features), self.advantage_stream(features)

    def forward(self, voxels: torch.Tensor, mode: torch.Tensor) -> torch.Tensor:
        value, advantages = self.streams(voxels, mode)
        return value + advantages - advantages.mean(dim=1, keepdim=True)
