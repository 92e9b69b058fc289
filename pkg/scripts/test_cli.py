"""
Command-line surface: exit codes, one-line errors and the export commands
"""

import csv
import json

import pytest

from geometry import cartesian_to_cyl
from scan_environment import TRAJECTORY_COLUMNS
from scan_planner import EXIT_IO_ERROR, EXIT_OK, EXIT_PLANNER_ERROR, build_parser, main
from scene import load_scene_file


def _run(log_monitor, tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path / "runs"), "--run-id", "cli", "--quiet"], log_monitor)


def test_parser_requires_command():
    args = build_parser().parse_args(["eval", "--config", "toy", "--policy", "random", "--episodes", "2"])
    assert (args.command, args.policy, args.episodes) == ("eval", "random", 2)


def test_greedy_eval_without_checkpoint(log_monitor, tmp_path, capsys):
    code = _run(log_monitor, tmp_path, "eval", "--config", "toy", "--policy", "greedy")
    assert code == EXIT_PLANNER_ERROR
    assert capsys.readouterr().err.startswith("error code=InvalidParams message=")


def test_unknown_config_key(log_monitor, tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"preset": "toy", "agent": {"gamma": 0.9}}), encoding="utf-8")
    code = _run(log_monitor, tmp_path, "export-scene", "--config", str(path))
    assert code == EXIT_PLANNER_ERROR
    err = capsys.readouterr().err
    assert "error code=ConfigError" in err and "agent.gamma" in err


def test_missing_config_file(log_monitor, tmp_path, capsys):
    code = _run(log_monitor, tmp_path, "export-scene", "--config", str(tmp_path / "absent.json"))
    assert code == EXIT_IO_ERROR
    assert capsys.readouterr().err.startswith("error code=IOError")


def test_bad_episode_count(log_monitor, tmp_path):
    assert _run(log_monitor, tmp_path, "eval", "--config", "toy", "--policy", "random",
                "--episodes", "0") == EXIT_PLANNER_ERROR


def test_export_scene(log_monitor, tmp_path):
    assert _run(log_monitor, tmp_path, "export-scene", "--config", "toy", "--seed", "3") == EXIT_OK
    run_dir = tmp_path / "runs" / "cli"
    grid, radius = load_scene_file(run_dir / "scene.txt")
    assert grid.dims == (30, 30, 30)
    assert grid.target.sum() > 0 and radius > 0


def test_export_trajectory_random(log_monitor, tmp_path):
    code = _run(log_monitor, tmp_path, "export-trajectory", "--config", "toy", "--policy", "random")
    assert code == EXIT_OK
    with open(tmp_path / "runs" / "cli" / "trajectory.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == TRAJECTORY_COLUMNS
    steps = [int(r[0]) for r in rows[1:]]
    assert steps == list(range(1, len(steps) + 1))


def test_eval_random_writes_report(log_monitor, tmp_path):
    code = _run(log_monitor, tmp_path, "eval", "--config", "toy", "--policy", "random", "--episodes", "2")
    assert code == EXIT_OK
    run_dir = tmp_path / "runs" / "cli"
    assert (run_dir / "eval_random_report.csv").exists()
    assert (run_dir / "eval_random_summary.txt").exists()
    assert json.loads((run_dir / "run_config.json").read_text(encoding="utf-8"))["preset"] == "toy"


def test_export_trajectory_maps_back_to_patient_mm(log_monitor, tmp_path, toy_scenario):
    native = toy_scenario.anatomy.frame
    generic = round(1.2 * native.radius, 3)
    path = tmp_path / "normalized.json"
    path.write_text(json.dumps({"preset": "toy", "scenario": {"generic_radius": generic}}), encoding="utf-8")
    assert _run(log_monitor, tmp_path, "export-trajectory", "--config", str(path), "--policy", "random") == EXIT_OK
    with open(tmp_path / "runs" / "cli" / "trajectory.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert rows
    for row in rows:
        h, theta, r = cartesian_to_cyl(native, [float(row["x"]), float(row["y"]), float(row["z"])])
        # contact points sit on the native skin, not on the resized one
        assert abs(r - native.radius) < 2.0
        assert generic - r > 10.0
        assert float(row["h"]) == pytest.approx(h, abs=1e-4)


def test_bad_probe_section_is_a_config_error(log_monitor, tmp_path, capsys):
    path = tmp_path / "probe.json"
    path.write_text(json.dumps({"preset": "toy", "probe": {"element_pitch": 0.0}}), encoding="utf-8")
    assert _run(log_monitor, tmp_path, "export-scene", "--config", str(path)) == EXIT_PLANNER_ERROR
    assert capsys.readouterr().err.startswith("error code=ConfigError")
