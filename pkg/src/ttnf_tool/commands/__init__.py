"""Commands package."""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

import typer
from rich.console import Console

from ttnf_tool.errors import EXIT_INTERNAL, TtnfError
from ttnf_tool.utils.log_formatter import RunManifest, write_manifest

log = logging.getLogger(__name__)
console = Console()

MANIFEST_FILE = "manifest.json"


def default_out(command: str) -> Path:
    return Path("runs") / command


def rebase_seeds(seeds: list[int], seed: Optional[int]) -> list[int]:
    """``--seed N`` turns the seed list into ``N, N+1, ...`` of the same length."""
    if seed is None:
        return list(seeds)
    return [seed + i for i in range(len(seeds))]


@contextmanager
def guarded_run(command: str, out: Path) -> Iterator[RunManifest]:
    """
    Run a command body with a manifest that is written on success and failure.

    Toolkit errors are printed and mapped to their exit codes. Anything else
    is logged with its traceback and exits with ``EXIT_INTERNAL``.
    """
    manifest = RunManifest(command, {})
    error: Optional[BaseException] = None
    try:
        yield manifest
    except TtnfError as exc:
        error = exc
        console.print(f"[red]❌ {exc}[/red]")
        raise typer.Exit(exc.exit_code)
    except typer.Exit:
        raise
    except Exception as exc:
        error = exc
        log.exception("%s failed unexpectedly", command)
        console.print(f"[red]❌ Erro interno: {type(exc).__name__}: {exc}[/red]")
        raise typer.Exit(EXIT_INTERNAL)
    finally:
        manifest.finish(error)
        try:
            write_manifest(Path(out) / MANIFEST_FILE, manifest)
        except OSError as exc:
            console.print(f"[yellow]⚠ Não foi possível gravar o manifesto: {exc}[/yellow]")
