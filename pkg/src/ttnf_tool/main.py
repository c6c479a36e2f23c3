"""Main CLI entry point."""

from enum import Enum
from pathlib import Path

import typer
from InquirerPy import inquirer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from ttnf_tool import __version__
from ttnf_tool.commands import bench, convert, denoise, scene
from ttnf_tool.config import SCHEMAS, config_to_dict, find_config_files, load_config, select_config
from ttnf_tool.core.tt import DEFAULT_MEM_BUDGET, set_mem_budget
from ttnf_tool.errors import ConfigError
from ttnf_tool.utils.log_formatter import setup_logging

console = Console()

app = typer.Typer(
    name="ttnf-tool",
    help="🧊 CLI para campos neurais em tensor-train (TT-NF)",
    no_args_is_help=False,  # allows interactive mode
    invoke_without_command=True,
)


class Precision(str, Enum):
    F32 = "f32"
    F64 = "f64"


DTYPES = {Precision.F32: "float32", Precision.F64: "float64"}

WIZARD_COMMANDS = [
    {"name": "🧪  Denoising (varredura de métodos)", "value": "denoise"},
    {"name": "📊  Benchmark de custo da amostragem", "value": "bench"},
    {"name": "🎯  Ajustar grade QTT a uma cena", "value": "fit"},
    {"name": "🖼️  Renderizar checkpoint", "value": "render"},
    {"name": "📄  Ver configuração padrão", "value": "defaults"},
    {"name": "❌  Sair", "value": "exit"},
]


def show_defaults(command: str):
    """Display the default configuration of a command."""
    cfg = config_to_dict(load_config(None, SCHEMAS[command]))
    table = Table(title=f"⚙️  Configuração padrão - {command}", header_style="bold cyan")
    table.add_column("Chave", style="cyan")
    table.add_column("Valor")
    table.add_column("Variável de ambiente", style="dim")
    for key, value in cfg.items():
        table.add_row(key, str(value), f"TTNF_{key.upper()}")
    console.print(table)


def run_wizard(ctx: typer.Context):
    """Interactive menu: pick a command, then a config file from the current directory."""
    while True:
        action = inquirer.select(
            message="🎯 O que deseja executar?",
            choices=WIZARD_COMMANDS,
        ).execute()

        if action == "exit":
            console.print("[dim]Até logo! 👋[/dim]")
            return

        if action == "defaults":
            command = inquirer.select(
                message="Comando:",
                choices=list(SCHEMAS),
            ).execute()
            show_defaults(command)
            inquirer.confirm(message="Pressione Enter para continuar...", default=True).execute()
            continue

        if not find_config_files(Path(".")):
            console.print("[dim]Nenhum .json no diretório atual; usando a configuração padrão.[/dim]")
            config = None
        else:
            config = select_config(Path("."))

        handlers = {
            "denoise": lambda: ctx.invoke(denoise.denoise, ctx, config=config, out=None, seed=None, jobs=1, no_timing=False),
            "bench": lambda: ctx.invoke(bench.bench, ctx, config=config, out=None, seed=None, jobs=1, no_timing=False),
            "fit": lambda: ctx.invoke(scene.fit, ctx, config=config, out=None, seed=None, no_timing=False),
            "render": lambda: ctx.invoke(scene.render, ctx, config=config, checkpoint=None, out=None),
        }
        try:
            handlers[action]()
        except typer.Exit as exc:
            if exc.exit_code:
                console.print(f"[yellow]⚠ Comando terminou com código {exc.exit_code}[/yellow]")


@app.callback(invoke_without_command=True)
def main(
    ctx: typer.Context,
    precision: Precision = typer.Option(Precision.F64, "--precision", help="Precisão dos núcleos"),
    mem_budget: int = typer.Option(DEFAULT_MEM_BUDGET, "--mem-budget", help="Orçamento de memória (elementos)"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Logs detalhados"),
):
    """
    🧊 TTNF Tool - campos neurais em tensor-train.

    Execute sem argumentos para modo interativo.
    """
    setup_logging(verbose)
    try:
        set_mem_budget(mem_budget)
    except ValueError as exc:
        console.print(f"[red]❌ {exc}[/red]")
        raise typer.Exit(ConfigError.exit_code)
    ctx.obj = {"dtype": DTYPES[precision], "mem_budget": mem_budget}

    # If a subcommand was invoked, let it handle things
    if ctx.invoked_subcommand is not None:
        return

    console.print(Panel(
        f"[bold cyan]🧊 TTNF Tool[/bold cyan] [dim]v{__version__}[/dim]\n\n"
        "Denoising, benchmarks de amostragem e ajuste de cenas com grades QTT.\n"
        "[dim]Selecione um comando para começar.[/dim]",
        border_style="cyan",
    ))
    run_wizard(ctx)


# Register subcommands
app.add_typer(denoise.app, name="denoise", help="Benchmark de denoising")
app.add_typer(bench.app, name="bench", help="Custo de espaço/tempo da amostragem")
app.command("fit")(scene.fit)
app.command("render")(scene.render)
app.command("scene")(scene.scene)
app.command("convert")(convert.convert)
app.command("info")(convert.info)


@app.command("version")
def version():
    """📋 Mostrar a versão instalada."""
    console.print(f"ttnf-tool [cyan]{__version__}[/cyan]")


if __name__ == "__main__":
    app()
