"""
Dueling Q-network: aggregation identity, value-shift invariance and gradient checks
"""

import pytest
import torch

from errors import ShapeMismatch
from q_network import QNetwork


def _net(seed=0, grid=6, channels=(2,), hidden=8):
    return QNetwork(grid_size=grid, conv_channels=channels, hidden=hidden, seed=seed).double()


def _inputs(batch=3, grid=6, seed=0):
    generator = torch.Generator().manual_seed(seed)
    voxels = torch.rand(batch, 9, grid, grid, grid, generator=generator, dtype=torch.float64)
    modes = torch.tensor([float(i % 2) for i in range(batch)], dtype=torch.float64)
    return voxels, modes


def test_output_shape():
    net = QNetwork(grid_size=30, conv_channels=(4, 4, 4), hidden=16)
    voxels = torch.zeros(2, 9, 30, 30, 30)
    assert net(voxels, torch.zeros(2)).shape == (2, 9)
    # three ceil-mode poolings: 30 -> 15 -> 8 -> 4
    assert net.feature_size == 4 * 4 ** 3


def test_dueling_mean_identity():
    net = _net()
    voxels, modes = _inputs()
    value, advantages = net.streams(voxels, modes)
    q = net(voxels, modes)
    assert torch.allclose(q.mean(dim=1), value.squeeze(1), atol=1e-9)
    assert torch.allclose(q - value, advantages - advantages.mean(dim=1, keepdim=True), atol=1e-9)


def test_zero_weights_give_zero_q():
    net = _net()
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    voxels, modes = _inputs()
    assert torch.count_nonzero(net(voxels, modes)) == 0


def test_value_shift_keeps_argmax():
    net = _net(seed=3)
    voxels, modes = _inputs(batch=5, seed=3)
    before = net(voxels, modes)
    with torch.no_grad():
        net.value_stream[-1].bias += 7.5
    after = net(voxels, modes)
    assert torch.equal(before.argmax(dim=1), after.argmax(dim=1))
    assert torch.allclose(after - before, torch.full_like(before, 7.5), atol=1e-9)


def test_mode_scalar_changes_output():
    net = _net(seed=1)
    voxels, _ = _inputs(batch=1, seed=1)
    q0 = net(voxels, torch.zeros(1, dtype=torch.float64))
    q1 = net(voxels, torch.ones(1, dtype=torch.float64))
    assert not torch.allclose(q0, q1)


def test_shape_mismatch():
    net = _net()
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 9, 5, 6, 6, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(2, 9, 6, 6, 6, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))


def test_seeded_initialization():
    a, b = QNetwork(6, (2,), 8, seed=4), QNetwork(6, (2,), 8, seed=4)
    c = QNetwork(6, (2,), 8, seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not all(torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def _gradcheck(seed):
    net = _net(seed=seed)
    voxels, modes = _inputs(batch=2, seed=seed)
    names = [name for name, _ in net.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in net.parameters())

    def q_of(*weights):
        return torch.func.functional_call(net, dict(zip(names, weights)), (voxels, modes))

    return torch.autograd.gradcheck(q_of, params, eps=1e-6, atol=1e-6, rtol=1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    assert _gradcheck(seed)


@pytest.mark.slow
def test_gradients_match_finite_differences_many_weights():
    for seed in range(3, 100):
        assert _gradcheck(seed)
