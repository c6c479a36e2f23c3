"""Console logging, result tables and run manifests."""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from ttnf_tool import __version__

console = Console()


def setup_logging(verbose: bool = False) -> None:
    """Route library logging through Rich; DEBUG with ``verbose``."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


def format_number(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, int) and abs(value) >= 10_000:
        return f"{value:,}".replace(",", ".")
    return str(value)


def create_results_table(title: str, columns: list[str], rows: Iterable[Iterable[Any]]) -> Table:
    """Create a Rich table with one row per result record."""
    table = Table(
        title=title,
        show_header=True,
        header_style="bold cyan",
        border_style="dim",
    )
    for i, name in enumerate(columns):
        table.add_column(name, style="cyan" if i == 0 else None, justify="left" if i == 0 else "right")
    for row in rows:
        table.add_row(*(format_number(v) for v in row))
    return table


def display_table(title: str, columns: list[str], rows: list[Iterable[Any]]):
    """Display result rows to console."""
    if not rows:
        console.print("[yellow]⚠ Nenhum resultado para exibir.[/yellow]")
        return
    console.print(create_results_table(title, columns, rows))
    console.print(f"\n[dim]Total: {len(rows)} linhas[/dim]")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__
    started_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    wall_clock_seconds: float = 0.0
    status: str = "running"
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def finish(self, error: Optional[BaseException] = None) -> None:
        self.wall_clock_seconds = time.perf_counter() - self._t0
        if error is None:
            self.status = "ok"
        else:
            self.status = "failed"
            self.error = f"{type(error).__name__}: {error}"

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("_t0")
        return data


def write_manifest(path: Path, manifest: RunManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2, ensure_ascii=False, default=str))
    return path
