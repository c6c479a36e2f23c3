"""Checkpoint commands - full/reduced conversion and inspection."""

from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.panel import Panel

from ttnf_tool.commands import default_out, guarded_run
from ttnf_tool.core.qtt import QttGrid
from ttnf_tool.core.tt import full_to_reduced, num_params, reduced_window
from ttnf_tool.errors import ConfigError, TtnfError
from ttnf_tool.utils.checkpoint import load_grid, load_tt, read_sidecar, save_grid, save_tt

console = Console()


def convert_checkpoint(src: Path, dst: Path) -> Path:
    """Write the reduced form of the TT (or grid) stored at ``src`` to ``dst``."""
    if read_sidecar(src).get("grid") is not None:
        grid = load_grid(src)
        return save_grid(dst, QttGrid(grid.config, full_to_reduced(grid.tt)))
    return save_tt(dst, full_to_reduced(load_tt(src)))


def convert(
    checkpoint: Path = typer.Argument(..., help="Checkpoint de entrada (.ttnf)"),
    to_reduced: bool = typer.Option(True, "--to-reduced/--keep-full", help="Converter para a forma reduzida"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Diretório de saída"),
):
    """
    🔁 Converter um checkpoint para a forma reduzida.
    """
    out = out or default_out("convert")
    with guarded_run("convert", out) as manifest:
        manifest.config = {"checkpoint": str(checkpoint), "to_reduced": to_reduced}
        if not to_reduced:
            raise ConfigError("only --to-reduced conversion is supported")
        dst = convert_checkpoint(checkpoint, out / (checkpoint.stem + "_reduced.ttnf"))
        manifest.artifacts.append(str(dst))
        console.print(f"[green]✓ Checkpoint reduzido gravado em[/green] [cyan]{dst}[/cyan]")


def info(
    checkpoint: Path = typer.Argument(..., help="Checkpoint (.ttnf)"),
):
    """
    ℹ️  Mostrar forma, ranks e parâmetros de um checkpoint.
    """
    try:
        tt = load_tt(checkpoint)
    except TtnfError as exc:
        console.print(f"[red]❌ {exc}[/red]")
        raise typer.Exit(exc.exit_code)
    p, q = reduced_window(tt.shape, tt.rank)
    meta = read_sidecar(checkpoint)

    info_text = f"""[bold]Modos:[/bold] {'x'.join(map(str, tt.shape.modes))}  (D={tt.ndim})
[bold]Payload:[/bold] {tt.shape.payload}
[bold]Ranks:[/bold] {', '.join(map(str, tt.rank.ranks))}
[bold]Parâmetros:[/bold] {num_params(tt):,}
[bold]Forma:[/bold] {'reduzida' if tt.is_reduced else 'completa'} (núcleos treináveis {p}..{q})
[bold]Precisão:[/bold] {tt.dtype.name}
"""
    grid = meta.get("grid")
    if grid:
        info_text += (
            f"\n[bold]Grade:[/bold] {2 ** grid['levels']}³ voxels, {grid['channels']} canais, r_max={grid['r_max']}\n"
            f"[bold]Caixa:[/bold] {grid['box_min']} .. {grid['box_max']}\n"
        )
    console.print(Panel(info_text, title=f"📦 {checkpoint.name}", border_style="cyan"))
