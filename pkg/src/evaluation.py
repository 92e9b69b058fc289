"""
Policy evaluation on held-out scenarios, target-position heatmaps and reward ablation sweeps
"""

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from actor_learner import episode_rng, eval_seed, make_environment, node_seed, run_training
from checkpoint_store import load_checkpoint
from dqn_agent import q_values, select_action
from errors import EmptyEpisode, InvalidParams, NoFeasiblePositions, PlacementFailed, ResetFailed
from geometry import cyl_to_cartesian
from q_network import QNetwork
from retry_strategies import RetryManager
from scan_environment import N_ACTIONS, Observation, ScanEnvironment
from scene import (assemble_scenario, generate_procedural_ribcage, load_segmented_meshes, normalize_to_generic,
                   place_target_at, SizeClass)

if TYPE_CHECKING:
    from settings_manager import RunConfig

Policy = Callable[[Observation, np.random.Generator], int]

REPORT_COLUMNS = ["episode", "scenario_seed", "success", "outcome", "steps", "P", "D", "coverage",
                  "return", "size_class", "n_targets"]
DEFAULT_SWEEP = [[0.0, 1.0, 0.5], [0.8, 1.0, 0.5], [0.95, 1.0, 0.5], [0.0, 0.0, 1.0], [0.0, 2.0, 0.0]]


@dataclass
class EvalConfig:
    episodes: int = 100
    policy: str = "greedy"
    heatmap_episodes: int = 20
    heatmap_semi_axes: Tuple[float, float, float] = (8.0, 8.0, 8.0)
    heatmap_stride: int = 2
    heatmap_half_width: float = 40.0
    heatmap_half_height: float = 40.0
    heatmap_depths: List[float] = field(default_factory=lambda: [12.0, 20.0, 28.0])
    heatmap_theta: float = 0.0
    heatmap_center_h: Optional[float] = None
    sweep: List[List[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_SWEEP])
    sweep_steps: Optional[int] = None

    def __post_init__(self):
        if self.episodes < 1 or self.heatmap_episodes < 1:
            raise InvalidParams("episode counts must be at least 1")
        if self.policy not in ("greedy", "random"):
            raise InvalidParams(f"unknown policy {self.policy}")
        if self.heatmap_stride < 1:
            raise InvalidParams("heatmap stride must be at least 1")
        if self.heatmap_half_width < 0 or self.heatmap_half_height < 0 or not self.heatmap_depths:
            raise InvalidParams("heatmap region must be non-negative with at least one depth")
        for row in self.sweep:
            if len(row) != 3:
                raise InvalidParams(f"sweep rows are [shadow_threshold, alpha1, alpha2], got {row}")


@dataclass
class EpisodeRecord:
    episode: int
    scenario_seed: int
    success: bool
    outcome: str
    steps: int
    P: float
    D: float
    coverage: float
    episode_return: float
    size_class: str
    n_targets: int

    def row(self) -> List[Any]:
        return [self.episode, self.scenario_seed, int(self.success), self.outcome, self.steps,
                f"{self.P:.6f}", f"{self.D:.6f}", f"{self.coverage:.6f}", f"{self.episode_return:.9g}",
                self.size_class, self.n_targets]


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    a = a[~np.isnan(a)]
    if len(a) == 0:
        return float("nan"), float("nan")
    return float(a.mean()), float(a.std())


@dataclass
class EvalReport:
    """Per-episode records; every aggregate is recomputed from them"""
    records: List[EpisodeRecord]
    policy: str = "greedy"

    def aggregate(self, records: Optional[Sequence[EpisodeRecord]] = None) -> Dict[str, float]:
        records = self.records if records is None else records
        steps = _mean_std([r.steps for r in records])
        P = _mean_std([r.P for r in records])
        D = _mean_std([r.D for r in records])
        return {
            'episodes': len(records),
            'success_rate': sum(r.success for r in records) / len(records) if records else float("nan"),
            'steps_mean': steps[0], 'steps_std': steps[1],
            'P_mean': P[0], 'P_std': P[1],
            'D_mean': D[0], 'D_std': D[1],
        }

    def groups(self) -> Dict[str, Dict[str, float]]:
        """All episodes, then by size class, then by target count"""
        out = {'all': self.aggregate()}
        for size in SizeClass:
            subset = [r for r in self.records if r.size_class == size.value]
            if subset:
                out[f"size={size.value}"] = self.aggregate(subset)
        for n in sorted({r.n_targets for r in self.records}):
            out[f"targets={n}"] = self.aggregate([r for r in self.records if r.n_targets == n])
        return out

    def to_csv(self, path: Union[str, Path]) -> str:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for r in self.records:
                writer.writerow(r.row())
        return str(path)

    def summary_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"policy: {self.policy}\n")
        buf.write(f"{'group':<12} {'n':>5} {'success':>8} {'steps':>16} {'P':>16} {'D':>16}\n")
        for name, g in self.groups().items():
            buf.write(f"{name:<12} {g['episodes']:>5d} {100 * g['success_rate']:>7.1f}% "
                      f"{g['steps_mean']:>8.2f}({g['steps_std']:.2f}) "
                      f"{100 * g['P_mean']:>8.2f}({100 * g['P_std']:.2f}) "
                      f"{g['D_mean']:>8.4f}({g['D_std']:.4f})\n")
        return buf.getvalue()

    def write(self, out_dir: Union[str, Path], stem: str = "eval") -> Tuple[str, str]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = self.to_csv(out_dir / f"{stem}_report.csv")
        text_path = out_dir / f"{stem}_summary.txt"
        text_path.write_text(self.summary_text(), encoding="utf-8")
        return csv_path, str(text_path)


def greedy_policy(network: QNetwork) -> Policy:
    def act(observation: Observation, rng: np.random.Generator) -> int:
        return select_action(q_values(network, observation), 0.0, rng)
    return act


def random_policy(observation: Observation, rng: np.random.Generator) -> int:
    return int(rng.integers(N_ACTIONS))


def load_policy_network(checkpoint: Union[str, Path]) -> QNetwork:
    state, _, _, _ = load_checkpoint(checkpoint)
    state.online.eval()
    return state.online


def make_policy(name: str, checkpoint: Optional[Union[str, Path]]) -> Policy:
    if name == "random":
        return random_policy
    if checkpoint is None:
        raise InvalidParams("greedy evaluation needs a checkpoint")
    return greedy_policy(load_policy_network(checkpoint))


def run_episode(env: ScanEnvironment, policy: Policy, rng: np.random.Generator, index: int = 0) -> EpisodeRecord:
    observation = env.reset(rng)
    total = 0.0
    while True:
        result = env.step(policy(observation, rng))
        total += result.reward
        observation = result.observation
        if result.done:
            break
    try:
        metrics = env.metrics()
        success, steps, P, D = metrics.success, metrics.steps, metrics.P, metrics.D
    except EmptyEpisode:
        success, steps, P, D = False, env.state.step_count, float("nan"), float("nan")
    targets = env.scenario.targets
    largest = max(targets, key=lambda t: t.volume)
    return EpisodeRecord(index, env.scenario.seed, success, env.state.outcome.value, steps, P, D,
                         result.info.coverage_fraction, total, largest.size_class.value, len(targets))


def evaluate(run_config: "RunConfig", policy: Policy, episodes: Optional[int] = None,
             log_monitor: Optional[Any] = None, policy_name: str = "greedy") -> EvalReport:
    """Episodes on held-out scenario seeds; scenarios that cannot be built or started are skipped"""
    episodes = episodes or run_config.evaluation.episodes
    logger = log_monitor.logger if log_monitor else None
    retry_manager = RetryManager(logger, log_monitor.metrics if log_monitor else None)
    records: List[EpisodeRecord] = []
    index = 0
    while len(records) < episodes:
        if index >= 10 * episodes:
            raise ResetFailed(f"only {len(records)} of {episodes} evaluation scenarios could be started")
        seed = eval_seed(run_config.master_seed, index)
        try:
            env = make_environment(run_config, seed, retry_manager, None)
            record = run_episode(env, policy, episode_rng(seed, 0), len(records))
        except (PlacementFailed, ResetFailed) as e:
            if logger:
                logger.warning(f"evaluation scenario {seed} skipped: {e}")
            index += 1
            continue
        records.append(record)
        index += 1
        if logger:
            logger.debug(f"eval episode {record.episode}: {record.outcome} in {record.steps} steps")
    report = EvalReport(records, policy_name)
    if logger:
        overall = report.aggregate()
        logger.info(f"Evaluated {episodes} episodes: success rate {100 * overall['success_rate']:.1f}%")
    return report


# Heatmaps

@dataclass
class HeatmapResult:
    """
    Success rate per (lateral, h) cell averaged over depth; mask marks cells
    with no feasible depth. Episodes whose start pose could not be drawn are
    counted in reset_failures and left out of the success rate.
    """
    lateral: NDArray[np.float64]
    heights: NDArray[np.float64]
    values: NDArray[np.float64]
    mask: NDArray[np.bool_]
    feasible: NDArray[np.int64]
    reset_failures: NDArray[np.int64]

    def to_csv(self, path: Union[str, Path]) -> str:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["lateral", "h", "success", "feasible_depths", "masked", "reset_failures"])
            for i, lat in enumerate(self.lateral):
                for j, h in enumerate(self.heights):
                    writer.writerow([f"{lat:.3f}", f"{h:.3f}", f"{self.values[i, j]:.6f}",
                                     int(self.feasible[i, j]), int(self.mask[i, j]),
                                     int(self.reset_failures[i, j])])
        return str(path)


def _native_anatomy(run_config: "RunConfig"):
    config = run_config.scenario
    if config.bone_mesh:
        anatomy, _ = load_segmented_meshes(config.bone_mesh, config.skin_mesh, [], config.resolution)
        return anatomy
    return generate_procedural_ribcage(config.ribcage, node_seed(run_config.master_seed, 0), config.resolution)


def _offsets(half: float, step: float) -> NDArray[np.float64]:
    n = int(math.floor(half / step + 1e-9))
    return np.arange(-n, n + 1, dtype=np.float64) * step


def run_heatmap(run_config: "RunConfig", policy: Policy, out_path: Optional[Union[str, Path]] = None,
                log_monitor: Optional[Any] = None,
                progress: Optional[Callable[[int, int], None]] = None) -> HeatmapResult:
    """
    Place the target template at each position of a (lateral, h, depth)
    lattice around the heatmap direction, run K episodes where it does not
    touch bone, and average success over depth.
    """
    config, ev = run_config.scenario, run_config.evaluation
    logger = log_monitor.logger if log_monitor else None
    anatomy = _native_anatomy(run_config)
    if config.generic_radius is not None:
        # positions are laid out on the generic cylinder, so normalize the bone once
        anatomy, _ = normalize_to_generic(anatomy, [], config.generic_radius)
        config = replace(config, generic_radius=None)
    frame = anatomy.frame
    step = config.resolution * ev.heatmap_stride
    h_center = ev.heatmap_center_h
    if h_center is None:
        h_center = 0.5 * (anatomy.bone_h_range[0] + anatomy.bone_h_range[1])
    lateral, heights = _offsets(ev.heatmap_half_width, step), h_center + _offsets(ev.heatmap_half_height, step)
    tangent = np.cross(frame.axis, frame.radial(ev.heatmap_theta))

    successes = np.zeros((len(lateral), len(heights)))
    feasible = np.zeros((len(lateral), len(heights)), dtype=np.int64)
    reset_failures = np.zeros_like(feasible)
    total = len(lateral) * len(heights) * len(ev.heatmap_depths)
    done = 0
    for i, lat in enumerate(lateral):
        for j, h in enumerate(heights):
            for depth in ev.heatmap_depths:
                done += 1
                center = cyl_to_cartesian(frame, h, ev.heatmap_theta, anatomy.bone_inner_radius - depth)
                center = center + lat * tangent
                center = (np.floor(center / config.resolution) + 0.5) * config.resolution
                target = place_target_at(anatomy, center, ev.heatmap_semi_axes, dims=config.grid_dims)
                if target is not None:
                    scenario = assemble_scenario(config, 0, anatomy, [target])
                    env = ScanEnvironment(scenario, run_config.reward, run_config.probe, run_config.steps)
                    wins = failed = 0
                    for k in range(ev.heatmap_episodes):
                        try:
                            wins += run_episode(env, policy, episode_rng(done, k), k).success
                        except ResetFailed as e:
                            failed += 1
                            if log_monitor:
                                log_monitor.metrics.record_error(type(e).__name__)
                            if logger:
                                logger.warning(f"Heatmap cell lateral={lat:.1f} h={h:.1f} depth={depth:.1f} "
                                               f"episode {k}: {e}")
                    reset_failures[i, j] += failed
                    if failed < ev.heatmap_episodes:
                        successes[i, j] += wins / (ev.heatmap_episodes - failed)
                        feasible[i, j] += 1
                if progress:
                    progress(done, total)

    mask = feasible == 0
    values = np.clip(np.divide(successes, feasible, out=np.zeros_like(successes), where=~mask), 0.0, 1.0)
    result = HeatmapResult(lateral, heights, values, mask, feasible, reset_failures)
    if out_path is not None:
        result.to_csv(out_path)
    if mask.all():
        raise NoFeasiblePositions("every heatmap position intersects bone, leaves the state grid "
                                  "or has no drawable start pose")
    if logger:
        logger.info(f"Heatmap: {int((~mask).sum())} of {mask.size} cells feasible, "
                    f"mean success {values[~mask].mean():.3f}, {int(reset_failures.sum())} reset failures")
    return result


# Ablation sweeps

@dataclass
class SweepRow:
    shadow_threshold: float
    alpha1: float
    alpha2: float
    checkpoint: str
    summary: Dict[str, float]


def sweep_configs(run_config: "RunConfig") -> List["RunConfig"]:
    rows = []
    for index, (threshold, alpha1, alpha2) in enumerate(run_config.evaluation.sweep):
        reward = replace(run_config.reward, shadow_threshold=threshold, alpha1=alpha1, alpha2=alpha2)
        agent = run_config.agent
        if run_config.evaluation.sweep_steps is not None:
            agent = replace(agent, total_steps=run_config.evaluation.sweep_steps)
        rows.append(replace(run_config, reward=reward, agent=agent, run_id=f"{run_config.run_id}_row{index}"))
    return rows


def run_sweep(run_config: "RunConfig", out_dir: Union[str, Path], log_monitor: Optional[Any] = None) -> List[SweepRow]:
    """Train and evaluate one policy per (shadow threshold, alpha1, alpha2) row"""
    out_dir = Path(out_dir)
    rows: List[SweepRow] = []
    for row_config in sweep_configs(run_config):
        reward = row_config.reward
        if log_monitor:
            log_monitor.logger.info(f"Sweep row {row_config.run_id}: T_th={reward.shadow_threshold} "
                                    f"alpha1={reward.alpha1} alpha2={reward.alpha2}")
        row_dir = out_dir / row_config.run_id
        trained = run_training(row_config, row_dir, log_monitor=log_monitor)
        report = evaluate(row_config, make_policy("greedy", trained.final_checkpoint), log_monitor=log_monitor)
        report.write(row_dir)
        rows.append(SweepRow(reward.shadow_threshold, reward.alpha1, reward.alpha2,
                             trained.final_checkpoint, report.aggregate()))

    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["shadow_threshold", "alpha1", "alpha2", "success_rate", "steps_mean", "steps_std",
                         "P_mean", "P_std", "D_mean", "D_std", "checkpoint"])
        for r in rows:
            s = r.summary
            writer.writerow([r.shadow_threshold, r.alpha1, r.alpha2, f"{s['success_rate']:.6f}",
                             f"{s['steps_mean']:.6f}", f"{s['steps_std']:.6f}", f"{s['P_mean']:.6f}",
                             f"{s['P_std']:.6f}", f"{s['D_mean']:.6f}", f"{s['D_std']:.6f}", r.checkpoint])
    return rows
