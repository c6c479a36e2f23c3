"""Sampling cost benchmark - analytic cost model sweep with optional measurement."""

import math
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn

from ttnf_tool.commands import default_out, guarded_run
from ttnf_tool.config import BenchConfig, config_to_dict, load_config
from ttnf_tool.core.cost import CostReport, sweep_costs, write_cost_csv
from ttnf_tool.core.sampling import SamplerKind
from ttnf_tool.core.tt import TtShape
from ttnf_tool.errors import ConfigError
from ttnf_tool.utils.log_formatter import display_table

console = Console()
app = typer.Typer(no_args_is_help=False)


def bench_shapes(cfg: BenchConfig) -> list[TtShape]:
    """One shape per requested size, all modes equal to ``mode_size``."""
    if cfg.mode_size < 2:
        raise ConfigError(f"mode_size must be >= 2, got {cfg.mode_size}")
    step = math.log2(cfg.mode_size)
    shapes = []
    for log2_size in cfg.log2_sizes:
        d = log2_size / step
        if d < 1 or d != int(d):
            raise ConfigError(f"2^{log2_size} is not a power of mode_size {cfg.mode_size}")
        shapes.append(TtShape((cfg.mode_size,) * int(d), cfg.payload))
    return shapes


def run_bench(cfg: BenchConfig, jobs: int = 1) -> list[CostReport]:
    try:
        kinds = [SamplerKind(k) for k in cfg.kinds]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return sweep_costs(
        bench_shapes(cfg),
        kinds,
        cfg.batches,
        ranks=cfg.ranks,
        training=cfg.training,
        measure=cfg.measure,
        measure_max_numel=2**cfg.measure_max_log2,
        seed=cfg.seed,
        jobs=jobs,
    )


@app.callback(invoke_without_command=True)
def bench(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Arquivo JSON do benchmark"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Diretório de saída"),
    seed: Optional[int] = typer.Option(None, "--seed", "-s", help="Seed dos índices medidos"),
    jobs: int = typer.Option(1, "--jobs", "-j", help="Processos paralelos"),
    no_timing: bool = typer.Option(False, "--no-timing", help="Zera a coluna de tempo no CSV"),
):
    """
    📊 Custo de espaço/tempo da amostragem (v1, v2, v3, contração).
    """
    out = out or default_out("bench")
    with guarded_run("bench", out) as manifest:
        cfg = load_config(config, BenchConfig)
        if seed is not None:
            cfg.seed = seed
        manifest.config = config_to_dict(cfg)
        manifest.seeds = [cfg.seed]

        console.print(Panel(
            "[bold cyan]📊 Benchmark de amostragem[/bold cyan]\n\n"
            f"Tamanhos: {', '.join(f'2^{s}' for s in cfg.log2_sizes)}  |  kinds: {', '.join(cfg.kinds)}\n"
            f"[dim]Medição {'ligada' if cfg.measure else 'desligada'} (até 2^{cfg.measure_max_log2})[/dim]",
            border_style="cyan",
        ))

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            progress.add_task("Calculando custos...", total=None)
            reports = run_bench(cfg, jobs)

        csv_path = write_cost_csv(out / "bench.csv", reports, timing=not no_timing)
        manifest.artifacts.append(str(csv_path))
        manifest.extra["seconds"] = [r.seconds for r in reports if r.seconds is not None]

        display_table(
            "📊 Custos por célula",
            ["Kind", "D", "r", "B", "Params", "FLOPs", "Memória", "Medido (s)"],
            [
                (r.kind.value, r.shape.ndim, r.r, r.batch, r.params, r.flops, r.peak_mem_elems,
                 "-" if r.seconds is None else f"{r.seconds:.4f}")
                for r in reports
            ],
        )
        console.print(f"[green]✓ Relatório gravado em[/green] [cyan]{csv_path}[/cyan]")
