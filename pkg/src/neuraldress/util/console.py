from __future__ import annotations
import logging
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

console = Console(stderr=True)


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=False)],
        force=True,
    )


def summary_table(title: str, rows: dict[str, float] | list[dict[str, object]]) -> Table:
    table = Table(title=title)
    if isinstance(rows, dict):
        table.add_column("metric")
        table.add_column("value", justify="right")
        for k, v in rows.items():
            table.add_row(k, f"{v:.6g}")
        return table
    if not rows:
        return table
    cols = list(rows[0].keys())
    for c in cols:
        table.add_column(c)
    for r in rows:
        table.add_row(*[f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in cols])
    return table
