"""
Checkpoint format: round trip, integrity checks and the numbered store
"""

import struct
from dataclasses import replace

import numpy as np
import pytest
import torch

from checkpoint_store import CheckpointStore, FORMAT_VERSION, load_checkpoint, read_checkpoint, write_checkpoint
from dqn_agent import build_train_state, train_batch
from errors import CorruptFile, FormatVersionMismatch
from test_agent import _batch


@pytest.fixture
def trained_state(tiny_agent):
    config = replace(tiny_agent, optimizer="adam")
    state = build_train_state(config, 6, seed=3)
    train_batch(state, _batch(), config.discount)
    state.step = 17
    state.rng.random(5)
    return state, config


def test_round_trip(tmp_path, trained_state):
    state, config = trained_state
    path = write_checkpoint(tmp_path / "a.csts", state, config, 6, metadata={"episodes": 3})
    loaded, loaded_config, extra, _ = load_checkpoint(path)
    assert loaded_config == config
    assert extra == {"episodes": 3}
    assert loaded.step == 17 and loaded.updates == 1
    for a, b in zip(state.online.parameters(), loaded.online.parameters()):
        assert torch.equal(a.detach(), b.detach())
    for a, b in zip(state.target.parameters(), loaded.target.parameters()):
        assert torch.equal(a.detach(), b.detach())
    assert loaded.rng.random() == state.rng.random()


def test_rewrite_is_byte_identical(tmp_path, trained_state):
    state, config = trained_state
    first = write_checkpoint(tmp_path / "a.csts", state, config, 6)
    loaded, loaded_config, _, _ = load_checkpoint(first)
    second = write_checkpoint(tmp_path / "b.csts", loaded, loaded_config, 6)
    assert (tmp_path / "a.csts").read_bytes() == (tmp_path / "b.csts").read_bytes()
    assert not (tmp_path / "a.csts.tmp").exists()
    assert second.endswith("b.csts")


def test_optimizer_state_survives(tmp_path, trained_state):
    state, config = trained_state
    path = write_checkpoint(tmp_path / "a.csts", state, config, 6)
    loaded, _, _, _ = load_checkpoint(path)
    original = state.optimizer.state_dict()["state"]
    restored = loaded.optimizer.state_dict()["state"]
    assert sorted(original) == sorted(restored)
    for index in original:
        assert torch.equal(original[index]["exp_avg"], restored[index]["exp_avg"])


def _corrupt(path, mutate):
    raw = bytearray(path.read_bytes())
    mutate(raw)
    path.write_bytes(bytes(raw))


def test_truncated_file(tmp_path, trained_state):
    path = tmp_path / "a.csts"
    write_checkpoint(path, *trained_state, 6)
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(CorruptFile):
        read_checkpoint(path)


def test_bad_magic(tmp_path, trained_state):
    path = tmp_path / "a.csts"
    write_checkpoint(path, *trained_state, 6)
    _corrupt(path, lambda raw: raw.__setitem__(slice(0, 4), b"XXXX"))
    with pytest.raises(CorruptFile):
        read_checkpoint(path)


def test_flipped_byte(tmp_path, trained_state):
    path = tmp_path / "a.csts"
    write_checkpoint(path, *trained_state, 6)

    def flip(raw):
        raw[len(raw) // 2] ^= 0xFF

    _corrupt(path, flip)
    with pytest.raises(CorruptFile):
        read_checkpoint(path)


def test_version_mismatch(tmp_path, trained_state):
    path = tmp_path / "a.csts"
    write_checkpoint(path, *trained_state, 6)
    _corrupt(path, lambda raw: raw.__setitem__(slice(4, 8), struct.pack("<I", FORMAT_VERSION + 1)))
    with pytest.raises(FormatVersionMismatch):
        read_checkpoint(path)


def test_store_numbering(tmp_path, trained_state):
    state, config = trained_state
    store = CheckpointStore(str(tmp_path / "checkpoints"))
    assert store.latest() is None
    store.save(state, config, 6)
    state.step = 120
    store.save(state, config, 6)
    assert store.latest().name == "checkpoint_0000000120.csts"
    assert len(store.list_checkpoints()) == 2
    meta, arrays = read_checkpoint(store.latest())
    assert meta["step"] == 120
    assert all(a.dtype == np.dtype("<f4") for a in arrays.values())
