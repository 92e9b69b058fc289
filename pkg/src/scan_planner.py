"""
Command-line entry points for the intercostal scan planner
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from actor_learner import episode_rng, eval_seed, make_environment, run_training
from errors import InvalidParams, ScanPlannerError
from evaluation import evaluate, make_policy, run_episode, run_heatmap, run_sweep
from logging_monitor import LoggingMonitor
from report_view import ReportView
from scan_environment import export_trajectory_csv
from scene import build_scenario, export_scene, load_scene_file
from settings_manager import RunConfig, SettingsManager

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_PLANNER_ERROR = 2
EXIT_IO_ERROR = 3


class ScanPlanner:
    """Runs the planner commands for one resolved configuration"""

    def __init__(self, run_config: RunConfig, log_monitor: LoggingMonitor, view: Optional[ReportView] = None,
                 settings_manager: Optional[SettingsManager] = None):
        self.run_config = run_config
        self.log_monitor = log_monitor
        self.logger = log_monitor.logger
        self.view = view or ReportView(logger=self.logger)
        self.settings_manager = settings_manager or SettingsManager(logger=self.logger)

    @property
    def run_dir(self) -> Path:
        return self.run_config.run_dir

    def _echo(self):
        path = self.settings_manager.echo(self.run_config, self.run_dir)
        self.logger.debug(f"Configuration echoed to {path}")

    def cmd_train(self, resume: Optional[str] = None):
        self._echo()
        self.logger.info(f"Training run {self.run_config.run_id} for {self.run_config.agent.total_steps:,} steps"
                         + (f", resuming from {resume}" if resume else ""))
        with self.view.training_progress(self.run_config.agent.total_steps) as progress:
            result = run_training(self.run_config, self.run_dir, resume, self.log_monitor, progress)
        self.log_monitor.export_metrics(f"metrics_{self.run_config.run_id}.json")
        self.view.show_training_result(result)
        self.view.show_metrics(self.log_monitor.get_current_metrics())
        return result

    def cmd_eval(self, checkpoint: Optional[str], episodes: Optional[int] = None, policy: Optional[str] = None):
        self._echo()
        policy = policy or self.run_config.evaluation.policy
        report = evaluate(self.run_config, make_policy(policy, checkpoint), episodes, self.log_monitor, policy)
        csv_path, text_path = report.write(self.run_dir, stem=f"eval_{policy}")
        self.view.show_eval_report(report)
        self.view.show_status(f"Report written to {csv_path} and {text_path}", "success")
        return report

    def cmd_heatmap(self, checkpoint: Optional[str], policy: Optional[str] = None):
        self._echo()
        ev = self.run_config.evaluation
        out_path = self.run_dir / "heatmap.csv"
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with self.view.training_progress(1, "Heatmap") as progress:
            result = run_heatmap(self.run_config, make_policy(policy or ev.policy, checkpoint), out_path,
                                 self.log_monitor, progress)
        self.view.show_heatmap(result)
        self.view.show_status(f"Heatmap written to {out_path}", "success")
        return result

    def cmd_sweep(self):
        self._echo()
        rows = run_sweep(self.run_config, self.run_dir / "sweep", self.log_monitor)
        self.view.show_sweep(rows)
        return rows

    def cmd_export_scene(self, index: int = 0) -> str:
        seed = eval_seed(self.run_config.master_seed, index)
        scenario = build_scenario(self.run_config.scenario, seed, logger=self.logger)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = export_scene(scenario.grid, scenario.anatomy.frame.radius, self.run_dir / "scene.txt")
        grid, _ = load_scene_file(path)
        if grid.channel_sums() != scenario.grid.channel_sums():
            raise InvalidParams(f"{path} does not round-trip")
        self.view.show_status(f"Scene {seed} written to {path}", "success")
        return path

    def cmd_export_trajectory(self, checkpoint: Optional[str], index: int = 0, policy: Optional[str] = None) -> str:
        seed = eval_seed(self.run_config.master_seed, index)
        env = make_environment(self.run_config, seed, log_monitor=self.log_monitor)
        record = run_episode(env, make_policy(policy or self.run_config.evaluation.policy, checkpoint),
                             episode_rng(seed, 0))
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = export_trajectory_csv(env.state.episode_log, env.trajectory(), self.run_dir / "trajectory.csv",
                                     env.scenario.anatomy)
        self.view.show_status(f"Trajectory of {record.steps} steps ({record.outcome}) written to {path}", "success")
        return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Intercostal ultrasound scan planner")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file, saved config name or preset (toy, default, ...)")
    common.add_argument("--seed", type=int, help="Master seed (overrides the config)")
    common.add_argument("--out", help="Output directory (overrides the config)")
    common.add_argument("--run-id", help="Run id (overrides the config)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="No console tables or progress bars")

    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="Train with the actor/learner topology")
    train.add_argument("--checkpoint", help="Resume from this checkpoint")

    for name, text in (("eval", "Evaluate a checkpoint on held-out scenarios"),
                       ("heatmap", "Success rate over target positions"),
                       ("export-trajectory", "Run one episode and write its trajectory CSV")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="Checkpoint to load (not needed for --policy random)")
        p.add_argument("--policy", choices=["greedy", "random"])
        if name == "eval":
            p.add_argument("--episodes", type=int)
        if name == "export-trajectory":
            p.add_argument("--index", type=int, default=0, help="Held-out scenario index")

    scene = sub.add_parser("export-scene", parents=[common], help="Write a scenario in the scene text format")
    scene.add_argument("--index", type=int, default=0, help="Held-out scenario index")
    sub.add_parser("sweep", parents=[common], help="Train and evaluate each reward ablation row")
    return parser


def run_command(args: argparse.Namespace, log_monitor: LoggingMonitor) -> None:
    settings = SettingsManager(config_dir=str(Path(__file__).parent.parent / "config"), logger=log_monitor.logger)
    run_config = settings.override(settings.load(args.config), args.seed, args.out, args.run_id)
    planner = ScanPlanner(run_config, log_monitor, ReportView(log_monitor.logger, args.quiet), settings)

    if args.command == "train":
        planner.cmd_train(args.checkpoint)
    elif args.command == "eval":
        if args.episodes is not None and args.episodes < 1:
            raise InvalidParams("--episodes must be at least 1")
        planner.cmd_eval(args.checkpoint, args.episodes, args.policy)
    elif args.command == "heatmap":
        planner.cmd_heatmap(args.checkpoint, args.policy)
    elif args.command == "sweep":
        planner.cmd_sweep()
    elif args.command == "export-scene":
        planner.cmd_export_scene(args.index)
    elif args.command == "export-trajectory":
        planner.cmd_export_trajectory(args.checkpoint, args.index, args.policy)


def main(argv: Optional[List[str]] = None, log_monitor: Optional[LoggingMonitor] = None) -> int:
    """Returns the process exit code; failures print one parseable line on stderr"""
    args = build_parser().parse_args(argv)
    if log_monitor is None:
        project_root = Path(__file__).parent.parent
        log_monitor = LoggingMonitor(
            log_dir=str(project_root / "logs"),
            monitoring_dir=str(project_root / "monitoring"),
            log_level=args.log_level,
            enable_console=True
        )
    else:
        log_monitor.set_level(args.log_level)

    try:
        run_command(args, log_monitor)
    except ScanPlannerError as e:
        log_monitor.logger.debug(f"{args.command} failed", exc_info=True)
        log_monitor.metrics.record_error(type(e).__name__)
        print(e.one_line(), file=sys.stderr)
        return EXIT_PLANNER_ERROR
    except OSError as e:
        log_monitor.metrics.record_error("IOError")
        text = str(e).replace('"', "'")
        print(f'error code=IOError message="{text}"', file=sys.stderr)
        return EXIT_IO_ERROR
    except KeyboardInterrupt:
        log_monitor.logger.info("Interrupted by user")
        return EXIT_UNEXPECTED
    except Exception as e:
        log_monitor.log_exception(e, args.command)
        text = str(e).replace('"', "'").replace("\n", " ")
        print(f'error code={type(e).__name__} message="{text}"', file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
