import arrow
import funcy
from rich.console import Group
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    TextColumn,
    TimeElapsedColumn,
)
from rich.rule import Rule
from rich.table import Table
from rich.text import Text

from .harness import ConsistencyReport, GradCheckReport, NoiseStatsReport


def format_timestamp(timestamp) -> str:
    return arrow.get(timestamp).to("local").format("YYYY-MM-DD HH:mm:ss")


def error_style(value: float, tolerance: float) -> Text:
    return Text(f"{value:.3e}", style="green" if value < tolerance else "red")


def verdict(passed: bool) -> Text:
    return Text("PASS", style="bold green") if passed else Text("FAIL", style="bold red")


def gradcheck_table(report: GradCheckReport) -> Table:
    table = Table(title=f"gradient check, {report.scenes} scenes")
    table.add_column("parameter")
    table.add_column("renderer")
    table.add_column("vgs pass-through")
    for name in report.errors:
        table.add_row(
            name,
            error_style(report.errors[name], report.tolerance),
            error_style(report.vgs_errors.get(name, 0.0), report.tolerance),
        )
    return table


def gradcheck_view(report: GradCheckReport) -> Group:
    return Group(
        gradcheck_table(report),
        Text.assemble(
            "zero cotangent: ",
            Text(f"{report.zero_cotangent:g}", style="blue"),
            "  tolerance: ",
            Text(f"{report.tolerance:g}", style="blue"),
            "  ",
            verdict(report.passed),
        ),
    )


def summary_table(values: dict, title: str | None = None) -> Table:
    table = Table.grid(padding=(0, 2))
    if title:
        table.title = title
    for name, value in values.items():
        shown = f"{value:.6g}" if isinstance(value, float) else str(value)
        table.add_row(name, Text(shown, style="blue"))
    return table


def noise_stats_view(report: NoiseStatsReport) -> Group:
    return Group(Rule("noise statistics"), summary_table(report.summary()))


def consistency_view(report: ConsistencyReport) -> Group:
    worst = int(report.errors.argmax())
    return Group(
        Rule("view consistency"),
        summary_table(
            {
                "poses": report.poses,
                "elevation": report.elevation,
                "radius": report.radius,
                "pairing": report.pairing,
                "mean": report.mean,
                "variance": report.variance,
                "worst pair": f"{worst} -> {(worst + 1) % report.poses}",
            }
        ),
    )


def ablation_table(rows: list[dict]) -> Table:
    table = Table(title="ablation")
    columns = ["cell", "steps", "gaussians", "heldout_error", "consistency_variance"]
    for column in columns:
        table.add_column(column.replace("_", " "))
    for row in rows:
        table.add_row(
            *funcy.lmap(
                lambda column: "-" if row[column] is None else (
                    f"{row[column]:.4e}" if isinstance(row[column], float) else str(row[column])
                ),
                columns,
            )
        )
    return table


def training_progress() -> Progress:
    return Progress(
        TextColumn("[bold blue]training"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("sigma {task.fields[sigma]:.3f}"),
        TextColumn("gaussians {task.fields[gaussians]}"),
        TimeElapsedColumn(),
    )
