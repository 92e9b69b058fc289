"""
Terminal rendering of training progress, evaluation reports, sweeps and heatmaps
"""

import json
import math
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterator, List, Optional

try:
    from rich.console import Console
    from rich.panel import Panel
    from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeRemainingColumn
    from rich.rule import Rule
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

HEAT_SHADES = " .:-=+*#%@"


def _pct(value: float) -> str:
    return "-" if math.isnan(value) else f"{100 * value:.1f}%"


def _mean_std(mean: float, std: float, scale: float = 1.0, digits: int = 2) -> str:
    if math.isnan(mean):
        return "-"
    return f"{scale * mean:.{digits}f} ({scale * std:.{digits}f})"


def heat_char(value: float, masked: bool) -> str:
    if masked:
        return "x"
    index = min(int(value * len(HEAT_SHADES)), len(HEAT_SHADES) - 1)
    return HEAT_SHADES[index]


class ReportView:
    """Console output for the scan planner commands"""

    def __init__(self, logger: Optional[Any] = None, quiet: bool = False):
        self.logger = logger
        self.quiet = quiet
        if RICH_AVAILABLE:
            self.console = Console()
        else:
            self.console = None
            if logger:
                logger.warning("Rich library not available, using plain output")

    def show_status(self, status: str, level: str = "info"):
        if self.quiet:
            return
        if self.console:
            colors = {'error': 'red', 'warning': 'yellow', 'success': 'green'}
            color = colors.get(level)
            self.console.print(f"[{color}]{status}[/{color}]" if color else status)
        else:
            print(status)

    def show_info_panel(self, title: str, content: str):
        if self.quiet:
            return
        if self.console:
            self.console.print(Panel(content, title=f"[bold cyan]{title}[/bold cyan]",
                                     border_style="cyan", padding=(1, 2)))
        else:
            print(f"\n{title}")
            print("-" * len(title))
            print(content)

    @contextmanager
    def training_progress(self, total: int, description: str = "Training") -> Iterator[Callable[[int, int], None]]:
        """Yields a progress(done, total) callback"""
        if not self.console or self.quiet:
            yield lambda done, total: None
            return
        progress = Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
            TimeRemainingColumn(),
            console=self.console,
        )
        with progress:
            task = progress.add_task(description, total=max(total, 1))
            yield lambda done, total: progress.update(task, completed=done, total=max(total, 1))

    def show_training_result(self, result: Any):
        lines = [
            f"[bold]Run directory:[/bold] {result.run_dir}",
            f"[bold]Final checkpoint:[/bold] {result.final_checkpoint}",
            f"[bold]Global step:[/bold] {result.global_step:,}",
            f"[bold]Episodes:[/bold] {result.episodes:,}",
            f"[bold]Transitions:[/bold] {result.received:,} received / {result.produced:,} produced",
        ]
        if self.console and not self.quiet:
            self.console.print(Panel("\n".join(lines), title="[bold green]Training finished[/bold green]",
                                     border_style="green"))
        elif not self.quiet:
            for line in lines:
                print(line.replace("[bold]", "").replace("[/bold]", ""))

    def show_eval_report(self, report: Any, title: str = "Evaluation"):
        groups = report.groups()
        if self.quiet:
            return
        if not self.console:
            print(report.summary_text())
            return
        table = Table(title=f"{title} ({report.policy} policy)", show_header=True, header_style="bold cyan")
        table.add_column("Group", style="cyan")
        table.add_column("Episodes", justify="right")
        table.add_column("Success", justify="right")
        table.add_column("Steps", justify="right")
        table.add_column("P (%)", justify="right")
        table.add_column("D", justify="right")
        for name, g in groups.items():
            table.add_row(name, str(g['episodes']), _pct(g['success_rate']),
                          _mean_std(g['steps_mean'], g['steps_std']),
                          _mean_std(g['P_mean'], g['P_std'], 100.0),
                          _mean_std(g['D_mean'], g['D_std'], digits=4))
        self.console.print(table)

    def show_sweep(self, rows: List[Any]):
        if self.quiet:
            return
        if not self.console:
            for r in rows:
                s = r.summary
                print(f"T_th={r.shadow_threshold} a1={r.alpha1} a2={r.alpha2}: "
                      f"success {_pct(s['success_rate'])}, P {_mean_std(s['P_mean'], s['P_std'], 100.0)}")
            return
        table = Table(title="Reward ablation", show_header=True, header_style="bold cyan")
        for name in ("T_th", "alpha1", "alpha2", "Success", "Steps", "P (%)", "D"):
            table.add_column(name, justify="right")
        for r in rows:
            s = r.summary
            table.add_row(f"{r.shadow_threshold:g}", f"{r.alpha1:g}", f"{r.alpha2:g}", _pct(s['success_rate']),
                          _mean_std(s['steps_mean'], s['steps_std']),
                          _mean_std(s['P_mean'], s['P_std'], 100.0),
                          _mean_std(s['D_mean'], s['D_std'], digits=4))
        self.console.print(table)

    def show_heatmap(self, result: Any):
        """Rows are heights (top = largest h), columns lateral offsets; x marks infeasible cells"""
        if self.quiet:
            return
        lines = []
        for j in range(len(result.heights) - 1, -1, -1):
            row = "".join(heat_char(result.values[i, j], result.mask[i, j]) for i in range(len(result.lateral)))
            lines.append(f"{result.heights[j]:8.1f} |{row}|")
        legend = f"lateral {result.lateral[0]:.1f} .. {result.lateral[-1]:.1f} mm; shades '{HEAT_SHADES}' = 0..1"
        if self.console:
            self.console.print(Rule("[bold cyan]Success heatmap[/bold cyan]"))
            self.console.print("\n".join(lines), markup=False, highlight=False)
            self.console.print(f"[dim]{legend}[/dim]")
        else:
            print("\n".join(lines))
            print(legend)

    def show_metrics(self, metrics: Dict[str, Any]):
        if self.quiet:
            return
        if not self.console:
            print(json.dumps(metrics, indent=2))
            return
        table = Table(title="Training metrics", show_header=False)
        table.add_column("Metric", style="bold")
        table.add_column("Value", justify="right")
        loss = metrics.get('loss', {})
        table.add_row("Updates logged", f"{loss.get('count', 0):,}")
        table.add_row("Mean loss", f"{loss.get('average', 0):.6f}")
        table.add_row("Target syncs", str(len(metrics.get('target_syncs', []))))
        table.add_row("Stale priority skips", str(metrics.get('stale_skips', 0)))
        for outcome, count in sorted(metrics.get('outcomes', {}).items()):
            table.add_row(f"Episodes {outcome}", f"{count:,}")
        for op, count in sorted(metrics.get('retry_counts', {}).items()):
            table.add_row(f"Retries {op}", f"{count:,}")
        self.console.print(table)
