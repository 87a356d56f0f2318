"""
LIDAR-EPW Console Messages
==========================

Rich rendering of command progress and results:
- Phase rules and success / error lines
- Dataset, LUT and training summaries
- Bench table and KPI report panel

Rendering only; nothing here touches written artifacts.

Author: LIDAR-EPW Team
"""

from typing import List, Optional

from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from ..core.evaluation import KpiReport
from ..core.training import BenchRow


def _fmt(value: Optional[float], digits: int = 4) -> str:
    return "empty" if value is None else f"{value:.{digits}f}"


class MessageDisplay:
    """Handles all user-facing console messages with styled output."""

    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console(stderr=True)

    def show_command_start(self, command: str, detail: str = "") -> None:
        self.console.rule(f"[bold blue]📡 {command}[/bold blue]", style="blue")
        if detail:
            self.console.print(f"[dim]{detail}[/dim]")

    def show_success(self, message: str) -> None:
        self.console.print(f"[bold green]✅ {message}[/bold green]")

    def show_warning(self, message: str) -> None:
        self.console.print(f"[yellow]⚠️  {message}[/yellow]")

    def show_error_message(self, error: str, exit_code: int) -> None:
        """Show an error with the exit code it maps to."""
        self.console.rule("[bold red]❌ Error[/bold red]", style="red")
        self.console.print(f"[red]❌ {error}[/red]")
        self.console.print(f"[dim]exit code {exit_code}[/dim]")

    def show_dataset_summary(self, out_dir: str, n_train: int, n_val: int, points: int) -> None:
        self.console.print(
            f"📦 Dataset in [bold]{out_dir}[/bold]: [bold]{n_train}[/bold] train / "
            f"[bold]{n_val}[/bold] val frames, [bold]{points}[/bold] ground-truth scan points"
        )

    def show_lut_summary(self, non_empty: int, total_bins: int, rays: int) -> None:
        self.console.print(f"📊 LUT: [bold]{non_empty}[/bold] of {total_bins} bins populated")
        self.console.print(f"📊 Echo histogram fitted on [bold]{rays}[/bold] rays")

    def training_progress(self) -> Progress:
        """Progress bar for epoch loops; use as a context manager."""
        return Progress(
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            TextColumn("[dim]{task.fields[status]}[/dim]"),
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        )

    def show_training_result(self, variant: str, echo: int, epochs: int, best_l1: float) -> None:
        self.console.print(
            f"  ✅ [green]{variant}[/green] echo {echo}: {epochs} epochs, best val L1 [bold]{best_l1:.4f}[/bold] ns"
        )

    def show_bench_table(self, rows: List[BenchRow]) -> None:
        table = Table(title="EPW network benchmark", header_style="bold cyan")
        for column in ("Variant", "MSE (ns²)", "Accuracy (%)", "Latency (ms)", "MFLOPs", "Parameters"):
            table.add_column(column, justify="right" if column != "Variant" else "left")
        for row in rows:
            table.add_row(
                row.variant, f"{row.mse:.4f}", f"{row.accuracy:.2f}", f"{row.latency_ms:.2f}",
                f"{row.flops / 1e6:.2f}", str(row.parameters),
            )
        self.console.print(table)

    def show_report(self, report: KpiReport) -> None:
        lines = []
        if report.error_stats:
            stats = report.error_stats
            lines.append(f"Matched points: [bold]{stats.matched}[/bold]")
            lines.append(f"Mean |error|: [bold]{stats.mean_abs_error:.4f}[/bold] ns   MSE: [bold]{stats.mse:.4f}[/bold] ns²")
        else:
            lines.append("[yellow]Unpaired traces: no point-wise error statistics[/yellow]")
        lines.append(
            f"Nonzero EPW: Wasserstein [bold]{_fmt(report.overall.wasserstein)}[/bold] ns, "
            f"intersection [bold]{_fmt(report.overall.intersection)}[/bold]"
        )
        self.console.print(Panel("\n".join(lines), title="KPI report", border_style="green"))
        if report.per_class:
            table = Table(header_style="bold cyan")
            for column in ("Class", "Matched", "MSE (ns²)", "Wasserstein", "Intersection"):
                table.add_column(column)
            for name, kpi in report.per_class.items():
                table.add_row(name, str(kpi.matched), _fmt(kpi.mse), _fmt(kpi.distribution.wasserstein),
                              _fmt(kpi.distribution.intersection))
            self.console.print(table)
        for index, kpi in enumerate(report.per_box):
            self.console.print(
                f"  📦 box {index}: {kpi.reference_points} / {kpi.predicted_points} points, "
                f"Wasserstein {_fmt(kpi.distribution.wasserstein)}"
            )

    def show_serving(self, host: str, port: int, backend: str) -> None:
        self.console.rule("[bold magenta]🌐 Service[/bold magenta]", style="magenta")
        self.console.print(f"[magenta]Listening on {host}:{port} ({backend} backend), Ctrl+C to stop[/magenta]")
