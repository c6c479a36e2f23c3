"""Scene commands - synthetic scene generation, grid fitting and rendering."""

import csv
import math
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from ttnf_tool.commands import default_out, guarded_run
from ttnf_tool.config import FitConfig, RenderConfigFile, config_to_dict, load_config
from ttnf_tool.core.qtt import QttGrid
from ttnf_tool.core.render import PSNR_CAP, RenderConfig, capped_psnr, psnr, render_image
from ttnf_tool.core.sampling import SamplerKind
from ttnf_tool.core.scene import (
    FitLogEntry,
    GridInit,
    Scene,
    SceneKind,
    ViewScore,
    evaluate_views,
    fit_scene,
    init_grid,
    make_synthetic_scene,
    mean_psnr,
    orbit_cameras,
)
from ttnf_tool.core.tt import num_params
from ttnf_tool.errors import ArtifactIOError, ConfigError
from ttnf_tool.utils.checkpoint import load_grid, save_grid
from ttnf_tool.utils.images import save_image
from ttnf_tool.utils.log_formatter import display_table

console = Console()

METRICS_COLUMNS = ["step", "split", "psnr", "loss", "seconds"]
VIEW_COLUMNS = ["view", "split", "psnr"]
CHECKPOINT_FILE = "grid.ttnf"


def render_config_from(cfg, steps: int = 0) -> RenderConfig:
    """Renderer settings shared by the fit and render configs."""
    try:
        return RenderConfig(
            samples_per_ray=cfg.samples_per_ray,
            rays_per_batch=cfg.rays_per_batch,
            activation=cfg.activation,
            background=tuple(cfg.background),
            steps=steps,
            lr_max=getattr(cfg, "lr_max", 3e-3),
            lr_min=getattr(cfg, "lr_min", 3e-5),
            warmup_frac=getattr(cfg, "warmup_frac", 0.05),
            lr_density_scale=getattr(cfg, "lr_density_scale", 1.0),
            lr_sh_scale=getattr(cfg, "lr_sh_scale", 1.0),
            log_every=max(1, getattr(cfg, "log_every", 100)),
            jitter=getattr(cfg, "jitter", False),
            seed=getattr(cfg, "seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _sampler(name: str) -> SamplerKind:
    try:
        kind = SamplerKind(name)
    except ValueError as exc:
        raise ConfigError(f"unknown sampler '{name}'") from exc
    if kind is SamplerKind.V1:
        raise ConfigError("v1 is too memory hungry for rendering; use v2, v3 or dense")
    return kind


def resolve_scene(cfg: FitConfig) -> Scene:
    """Load ``cfg.scene`` or build the configured synthetic scene."""
    if cfg.scene:
        return Scene.load(Path(cfg.scene))
    try:
        kind = SceneKind(cfg.synthetic)
    except ValueError as exc:
        raise ConfigError(f"unknown synthetic scene '{cfg.synthetic}'") from exc
    return make_synthetic_scene(
        kind,
        cfg.levels,
        num_cameras=cfg.num_cameras,
        image_size=cfg.image_size,
        samples_per_ray=cfg.samples_per_ray,
        background=tuple(cfg.background),
    )


def write_metrics_csv(path: Path, entries: list[FitLogEntry], timing: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for e in entries:
            writer.writerow({
                "step": e.step,
                "split": e.split,
                "psnr": f"{capped_psnr(e.psnr):.6f}",
                "loss": repr(e.loss),
                "seconds": f"{e.seconds:.6f}" if timing else "0",
            })
    return path


def write_views_csv(path: Path, scores: list[ViewScore]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=VIEW_COLUMNS)
        writer.writeheader()
        for s in scores:
            writer.writerow({"view": s.view, "split": s.split, "psnr": f"{capped_psnr(s.psnr):.6f}"})
    return path


def _split_entries(scores: list[ViewScore], step: int) -> list[FitLogEntry]:
    entries = []
    for split in ("train", "test"):
        value = mean_psnr(scores, split)
        if math.isnan(value):
            continue
        loss = 0.0 if math.isinf(value) else 10.0 ** (-value / 10.0)
        entries.append(FitLogEntry(step, split, value, loss, 0.0))
    return entries


def fit(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Arquivo JSON do ajuste"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Diretório de saída"),
    seed: Optional[int] = typer.Option(None, "--seed", "-s", help="Seed da inicialização e dos raios"),
    no_timing: bool = typer.Option(False, "--no-timing", help="Zera a coluna de tempo no CSV"),
):
    """
    🎯 Ajustar uma grade QTT às vistas de uma cena.
    """
    out = out or default_out("fit")
    dtype = np.dtype((ctx.obj or {}).get("dtype", "float64"))
    with guarded_run("fit", out) as manifest:
        cfg = load_config(config, FitConfig)
        if seed is not None:
            cfg.seed = seed
        manifest.config = config_to_dict(cfg)
        manifest.seeds = [cfg.seed]
        kind = _sampler(cfg.sampler)
        try:
            init = GridInit(cfg.init)
        except ValueError as exc:
            raise ConfigError(f"unknown init '{cfg.init}'") from exc
        render_cfg = render_config_from(cfg, cfg.steps)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            progress.add_task("Preparando cena e grade...", total=None)
            scene = resolve_scene(cfg)
            dense_cfg = render_config_from(cfg, cfg.dense_steps)
            grid = init_grid(scene, cfg.r_max, init, cfg.sigma, cfg.seed, kind, dense_cfg)
            grid = QttGrid(grid.config, grid.tt.astype(dtype))

        console.print(Panel(
            f"[bold cyan]🎯 Ajuste de cena[/bold cyan]\n\n"
            f"Cena: {scene.kind}  |  {scene.config.side}³ voxels  |  {len(scene.cameras)} vistas\n"
            f"Grade: r_max={cfg.r_max}, {num_params(grid.tt):,} parâmetros, init={init.value}, sampler={kind.value}\n"
            f"[dim]{cfg.steps} passos, {cfg.rays_per_batch} raios/lote, {cfg.samples_per_ray} amostras/raio[/dim]",
            border_style="cyan",
        ))

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TextColumn("{task.completed}/{task.total}"),
            console=console,
        ) as progress:
            task = progress.add_task("Treinando...", total=max(cfg.steps, 1))
            result = fit_scene(
                grid, scene, render_cfg, kind, progress=lambda done, total: progress.update(task, completed=done)
            )

        checkpoint = save_grid(out / CHECKPOINT_FILE, result.grid)
        manifest.artifacts.append(str(checkpoint))

        scores = evaluate_views(result.grid, scene, render_cfg, kind)
        entries = result.log + _split_entries(scores, cfg.steps)
        metrics = write_metrics_csv(out / "metrics.csv", entries, timing=not no_timing)
        views = write_views_csv(out / "views.csv", scores)
        manifest.artifacts += [str(metrics), str(views)]
        manifest.extra["psnr"] = {"train": mean_psnr(scores, "train"), "test": mean_psnr(scores, "test")}

        display_table(
            "📈 Log de treino",
            ["Passo", "Split", "PSNR (dB)", "Loss"],
            [(e.step, e.split, min(e.psnr, PSNR_CAP), e.loss) for e in entries],
        )
        console.print(f"[green]✓ Grade gravada em[/green] [cyan]{checkpoint}[/cyan]")


def render(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Arquivo JSON da renderização"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Checkpoint da grade (.ttnf)"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Diretório de saída"),
):
    """
    🖼️  Renderizar uma grade salva (uma imagem por câmera).
    """
    out = out or default_out("render")
    with guarded_run("render", out) as manifest:
        cfg = load_config(config, RenderConfigFile)
        if checkpoint is not None:
            cfg.checkpoint = str(checkpoint)
        manifest.config = config_to_dict(cfg)
        if not cfg.checkpoint:
            raise ConfigError("no checkpoint given (use --checkpoint or the 'checkpoint' key)")
        if cfg.image_format not in ("ppm", "png"):
            raise ConfigError(f"image_format must be 'ppm' or 'png', got '{cfg.image_format}'")
        kind = _sampler(cfg.sampler)
        render_cfg = render_config_from(cfg)

        grid = load_grid(Path(cfg.checkpoint))
        if kind is SamplerKind.V3 and not grid.tt.is_reduced:
            grid = grid.to_reduced()
        scene = Scene.load(Path(cfg.scene)) if cfg.scene else None
        cameras = scene.cameras if scene else orbit_cameras(grid.config, cfg.num_cameras, cfg.image_size)

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("Renderizando...", total=len(cameras))
            images = []
            for cam in cameras:
                images.append(render_image(grid, cam, render_cfg, kind))
                progress.advance(task)

        for i, image in enumerate(images):
            path = save_image(out / f"view_{i:03d}.{cfg.image_format}", image)
            manifest.artifacts.append(str(path))

        if scene is not None:
            test = set(scene.test_views)
            scores = [
                ViewScore(i, "test" if i in test else "train", psnr(img, scene.images[i]))
                for i, img in enumerate(images)
            ]
            views = write_views_csv(out / "views.csv", scores)
            manifest.artifacts.append(str(views))
            display_table(
                "🖼️  PSNR por vista",
                ["Vista", "Split", "PSNR (dB)"],
                [(s.view, s.split, min(s.psnr, PSNR_CAP)) for s in scores],
            )
        console.print(f"[green]✓ {len(images)} imagens gravadas em[/green] [cyan]{out}[/cyan]")


def scene(
    kind: str = typer.Option("sphere", "--kind", "-k", help="sphere, two_boxes ou empty"),
    levels: int = typer.Option(5, "--levels", "-l", help="Níveis D (lado 2^D)"),
    image_size: int = typer.Option(32, "--image-size", help="Lado das imagens em pixels"),
    num_cameras: int = typer.Option(8, "--num-cameras", help="Número de câmeras (>= 8)"),
    samples: int = typer.Option(64, "--samples", help="Amostras por raio do ground truth"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Diretório da cena"),
):
    """
    🌐 Gerar uma cena sintética (grade densa, câmeras e imagens).
    """
    out = out or default_out("scene")
    with guarded_run("scene", out) as manifest:
        manifest.config = {
            "kind": kind,
            "levels": levels,
            "image_size": image_size,
            "num_cameras": num_cameras,
            "samples": samples,
        }
        try:
            scene_kind = SceneKind(kind)
        except ValueError as exc:
            raise ConfigError(f"unknown scene kind '{kind}'") from exc
        if num_cameras < 8:
            raise ConfigError("a synthetic scene needs at least 8 cameras")

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            progress.add_task("Renderizando ground truth...", total=None)
            built = make_synthetic_scene(scene_kind, levels, num_cameras, image_size, samples)
        try:
            path = built.save(out)
        except OSError as exc:
            raise ArtifactIOError(f"cannot write scene to {out}: {exc}") from exc
        manifest.artifacts.append(str(path))
        console.print(f"[green]✓ Cena '{scene_kind.value}' gravada em[/green] [cyan]{path}[/cyan]")
