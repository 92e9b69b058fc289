"""
Run configuration loading: presets, strict typing and echo round trips
"""

import json

import numpy as np
import pytest

from errors import ConfigError
from scene import build_scenario
from settings_manager import PRESETS, RunConfig, SettingsManager, from_dict, merge


@pytest.fixture
def manager(tmp_path):
    return SettingsManager(config_dir=str(tmp_path / "config"))


def _write(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data) if not isinstance(data, str) else data, encoding="utf-8")
    return path


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_load(manager, name):
    config = manager.preset(name)
    assert config.preset == name


def test_toy_preset_values(manager):
    config = manager.preset("toy")
    assert config.scenario.ribcage.n_ribs == 2
    assert config.scenario.fixed_target.semi_axes == (8.0, 8.0, 8.0)
    assert config.agent.conv_channels == [8, 16, 16]
    assert config.topology.deterministic


def test_unknown_key_names_dotted_path(manager, tmp_path):
    path = _write(tmp_path, {"scenario": {"ribcage": {"n_rib": 3}}})
    with pytest.raises(ConfigError) as excinfo:
        manager.load(path)
    assert "scenario.ribcage.n_rib" in str(excinfo.value)


@pytest.mark.parametrize("data,where", [
    ({"agent": {"batch_size": 3.5}}, "agent.batch_size"),
    ({"agent": {"batch_size": True}}, "agent.batch_size"),
    ({"reward": {"alpha1": "one"}}, "reward.alpha1"),
    ({"topology": {"deterministic": 1}}, "topology.deterministic"),
    ({"scenario": {"semi_axis_range": [8.0]}}, "scenario.semi_axis_range"),
    ({"scenario": {"size_classes": "S"}}, "scenario.size_classes"),
])
def test_type_errors(manager, tmp_path, data, where):
    with pytest.raises(ConfigError) as excinfo:
        manager.load(_write(tmp_path, data))
    assert where in str(excinfo.value)


def test_integers_accepted_for_floats(manager, tmp_path):
    config = manager.load(_write(tmp_path, {"reward": {"alpha1": 2}}))
    assert config.reward.alpha1 == 2.0 and isinstance(config.reward.alpha1, float)


@pytest.mark.parametrize("data,section", [
    ({"reward": {"shadow_threshold": 2.0}}, "reward"),
    ({"probe": {"element_pitch": 0.0}}, "probe"),
    ({"probe": {"footprint_length": 1.0, "element_pitch": 2.0}}, "probe"),
])
def test_value_errors_become_config_errors(manager, tmp_path, data, section):
    with pytest.raises(ConfigError) as excinfo:
        manager.load(_write(tmp_path, data))
    assert excinfo.value.code == "ConfigError"
    assert str(excinfo.value).startswith(f"{section}:")


def test_malformed_json_reports_position(manager, tmp_path):
    path = _write(tmp_path, '{\n  "run_id": "x",\n  oops\n}')
    with pytest.raises(ConfigError) as excinfo:
        manager.load(path)
    assert f"{path}:3:" in str(excinfo.value)


def test_file_merges_over_named_preset(manager, tmp_path):
    config = manager.load(_write(tmp_path, {"preset": "toy", "agent": {"hidden": 12}}))
    assert config.agent.hidden == 12
    assert config.agent.conv_channels == [8, 16, 16]
    assert config.scenario.ribcage.n_ribs == 2


def test_unknown_preset_in_file(manager, tmp_path):
    with pytest.raises(ConfigError):
        manager.load(_write(tmp_path, {"preset": "huge"}))
    with pytest.raises(ConfigError):
        manager.preset("huge")


def test_schema_version_checked(manager, tmp_path):
    with pytest.raises(ConfigError):
        manager.load(_write(tmp_path, {"schema_version": 2}))


def test_echo_then_load_is_identical(manager, tmp_path):
    original = manager.preset("two_gap")
    path = manager.echo(original, tmp_path / "run")
    assert manager.load(path) == original


def test_saved_config_resolves_by_name(manager):
    original = manager.override(manager.preset("toy"), run_id="named")
    manager.save(original, "mine")
    assert manager.load("mine") == original


def test_preset_name_as_source(manager):
    assert manager.load("toy") == manager.preset("toy")
    assert manager.load() == manager.preset("default")


def test_overrides(manager):
    config = manager.override(manager.preset("default"), seed=9, out="elsewhere", run_id="r2")
    assert (config.master_seed, config.output_dir, config.run_id) == (9, "elsewhere", "r2")
    assert str(config.run_dir).endswith("r2")
    with pytest.raises(ConfigError):
        manager.override(config, seed=-1)


def test_merge_is_deep():
    merged = merge({"a": {"b": 1, "c": 2}, "d": [1]}, {"a": {"b": 5}, "d": [2, 3]})
    assert merged == {"a": {"b": 5, "c": 2}, "d": [2, 3]}


def test_from_dict_rejects_non_object():
    with pytest.raises(ConfigError):
        from_dict(RunConfig, ["not", "an", "object"])


def test_default_preset_varies_rib_cages(manager):
    config = manager.preset("default")
    assert config.scenario.variants is not None
    first = build_scenario(config.scenario, 1)
    second = build_scenario(config.scenario, 3)
    assert first.anatomy.bone_inner_radius != second.anatomy.bone_inner_radius
    assert not np.array_equal(first.anatomy.bone_voxels, second.anatomy.bone_voxels)
    assert not np.array_equal(first.grid.bone, second.grid.bone)
