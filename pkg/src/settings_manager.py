"""
Run configuration: typed JSON key tree merged over named presets
"""

import copy
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union, get_args, get_origin, get_type_hints

from acoustics import ProbeModel
from actor_learner import NodeTopology
from dqn_agent import AgentConfig
from errors import ConfigError, ScanPlannerError
from evaluation import EvalConfig
from scan_environment import ActionSteps, RewardParams
from scene import ScenarioConfig

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    agent: AgentConfig = field(default_factory=AgentConfig)
    topology: NodeTopology = field(default_factory=NodeTopology)
    probe: ProbeModel = field(default_factory=ProbeModel)
    steps: ActionSteps = field(default_factory=ActionSteps)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    preset: str = "default"
    run_id: str = "run"
    output_dir: str = "runs"
    master_seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset}")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


PRESETS: Dict[str, Dict[str, Any]] = {
    "default": {
        "scenario": {"variants": {}},
    },
    "toy": {
        "scenario": {
            "ribcage": {"n_ribs": 2, "gap": 25.0, "rib_radius": 6.0},
            "fixed_target": {"gap_index": 0, "theta": 0.0, "depth": 20.0, "semi_axes": [8.0, 8.0, 8.0]},
            "generic_radius": None,
            "start_rule": "above_target",
        },
        "agent": {
            "learning_rate": 5e-4,
            "optimizer": "adam",
            "target_sync_every": 1000,
            "epsilon_decay_steps": 10000,
            "total_steps": 20000,
            "learn_start": 500,
            "replay_capacity": 20000,
            "conv_channels": [8, 16, 16],
            "hidden": 64,
            "checkpoint_every": 5000,
        },
        "topology": {"n_actors": 1, "deterministic": True, "episodes_per_scenario": 1000},
        "evaluation": {"episodes": 50},
    },
    "multi_target": {
        "scenario": {
            "variants": {},
            "n_targets": 3,
            "randomize_target_count": True,
            "size_classes": ["S", "M"],
        },
    },
    "two_gap": {
        "scenario": {
            "ribcage": {"n_ribs": 3, "gaps": [25.0, 10.0], "rib_radius": 6.0},
            "fixed_target": {"gap_index": 0, "theta": 0.0, "depth": 20.0, "semi_axes": [8.0, 8.0, 8.0]},
            "generic_radius": None,
            "start_rule": "above_target",
        },
        "evaluation": {"heatmap_half_width": 24.0, "heatmap_half_height": 36.0},
    },
}


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _type_name(tp: Any) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp: Any, value: Any, path: str) -> Any:
    """Check value against the annotation tp and convert JSON lists to tuples where needed"""
    origin, args = get_origin(tp), get_args(tp)
    if tp is Any:
        return value
    if origin is Union or origin is getattr(types, "UnionType", None):
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: null is not allowed")
        options = [a for a in args if a is not type(None)]
        return _coerce(options[0], value, path)
    if is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        item = args[0] if args else Any
        return [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def from_dict(cls: type, data: Any, path: str = "") -> Any:
    """Build a config dataclass; unknown keys and type errors name the dotted key path"""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {_join(path, key)}", {'key': _join(path, key)})
    kwargs = {key: _coerce(hints[key], value, _join(path, key)) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ScanPlannerError as e:
        raise ConfigError(f"{path or 'config'}: {e}", {'section': path})


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Deep merge; nested objects merge key by key, everything else is replaced"""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class SettingsManager:
    """Loads, saves and echoes run configurations"""

    def __init__(self, config_dir: str = "config", logger: Optional[Any] = None):
        self.config_dir = Path(config_dir)
        self.logger = logger

    def resolve(self, source: Union[str, Path]) -> Path:
        """A file path, or the name of a file saved in the config directory"""
        path = Path(source)
        if path.exists():
            return path
        named = self.config_dir / f"{source}.json"
        if named.exists():
            return named
        return path

    def preset(self, name: str) -> RunConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name}; choose from {', '.join(sorted(PRESETS))}")
        return from_dict(RunConfig, merge(PRESETS[name], {"preset": name}))

    def load(self, source: Optional[Union[str, Path]] = None) -> RunConfig:
        """
        Read a JSON config and merge it over the preset it names ("default" if none)

        Args:
            source: Path, saved config name, preset name, or None for the default preset
        """
        if source is None:
            return self.preset("default")
        path = self.resolve(source)
        if not path.exists() and str(source) in PRESETS:
            return self.preset(str(source))
        text = path.read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        name = data.get("preset", "default")
        if name not in PRESETS:
            raise ConfigError(f"{path}: unknown preset {name!r}", {'key': 'preset'})
        run_config = from_dict(RunConfig, merge(PRESETS[name], data))
        if self.logger:
            self.logger.info(f"Loaded configuration {path} (preset {name}, run {run_config.run_id})")
        return run_config

    def override(self, run_config: RunConfig, seed: Optional[int] = None, out: Optional[str] = None,
                 run_id: Optional[str] = None) -> RunConfig:
        """Apply command-line overrides and revalidate"""
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes["master_seed"] = seed
        if out is not None:
            changes["output_dir"] = out
        if run_id is not None:
            changes["run_id"] = run_id
        return replace(run_config, **changes) if changes else run_config

    def save(self, run_config: RunConfig, name: str) -> str:
        self.config_dir.mkdir(parents=True, exist_ok=True)
        path = self.config_dir / f"{name}.json"
        path.write_text(json.dumps(run_config.to_dict(), indent=2) + "\n", encoding="utf-8")
        if self.logger:
            self.logger.debug(f"Configuration saved to {path}")
        return str(path)

    def echo(self, run_config: RunConfig, out_dir: Union[str, Path]) -> str:
        """Write the resolved configuration into a run directory"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "run_config.json"
        path.write_text(json.dumps(run_config.to_dict(), indent=2) + "\n", encoding="utf-8")
        return str(path)
