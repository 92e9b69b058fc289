"""
Shared fixtures for the scan planner tests
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Add src directory to path
script_dir = Path(__file__).parent
src_dir = script_dir.parent / "src"
sys.path.insert(0, str(src_dir))

from dqn_agent import AgentConfig  # noqa: E402
from geometry import VoxelGrid  # noqa: E402
from logging_monitor import LoggingMonitor  # noqa: E402
from scene import build_scenario  # noqa: E402
from settings_manager import SettingsManager  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long training acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_grid():
    """Empty 10^3 grid of 1 mm voxels at the origin"""
    return VoxelGrid(np.zeros(3), 1.0, (10, 10, 10))


@pytest.fixture
def log_monitor(tmp_path):
    monitor = LoggingMonitor(log_dir=str(tmp_path / "logs"), monitoring_dir=str(tmp_path / "monitoring"),
                             log_level="DEBUG", enable_console=False)
    yield monitor
    monitor.close()


@pytest.fixture(scope="session")
def toy_config():
    return SettingsManager(config_dir="config").preset("toy")


@pytest.fixture(scope="session")
def toy_scenario(toy_config):
    return build_scenario(toy_config.scenario, 0)


@pytest.fixture
def tiny_agent():
    """Reduced network and buffer for fast learner tests"""
    return AgentConfig(conv_channels=[2], hidden=8, batch_size=4, replay_capacity=16, learn_start=4,
                       target_sync_every=5, total_steps=100, epsilon_decay_steps=100, checkpoint_every=50)


@pytest.fixture
def fast_toy(toy_config, tmp_path):
    """Toy preset with a reduced network, writing under tmp_path"""
    agent = replace(toy_config.agent, conv_channels=[2, 2], hidden=8, batch_size=8, learn_start=40,
                    total_steps=120, checkpoint_every=60, replay_capacity=500, optimizer="sgd",
                    learning_rate=1e-3)
    return replace(toy_config, agent=agent, output_dir=str(tmp_path / "runs"), run_id="fast")
