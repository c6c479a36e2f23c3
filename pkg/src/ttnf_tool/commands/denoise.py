"""Denoising benchmark - ground truth, noise, baselines, optimized runs and the sweep command."""

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import typer
from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn

from ttnf_tool.commands import default_out, guarded_run, rebase_seeds
from ttnf_tool.config import DenoiseSweepConfig, config_to_dict, load_config
from ttnf_tool.core.optim import AdamState, LossKind, LrSchedule, adam_step_tt, loss_and_grad, lr_at
from ttnf_tool.core.sampling import SamplerKind, backward, epoch_batches, gather_dense, sample_with_trace, uniform_batch
from ttnf_tool.core.tt import (
    DenseTensor,
    TensorTrain,
    TtShape,
    clamp_ranks,
    contract,
    contract_backward,
    full_to_reduced,
    get_mem_budget,
    init_random,
    max_rank_pyramid,
    rmse,
    set_mem_budget,
    tt_svd,
)
from ttnf_tool.errors import ArtifactIOError, ConfigError, NumericalError, ShapeError
from ttnf_tool.utils.log_formatter import display_table

log = logging.getLogger(__name__)
console = Console()
app = typer.Typer(no_args_is_help=False)

CSV_COLUMNS = ["method", "family", "scale", "r_gen", "r_fit", "steps", "batch", "seed", "rmse", "seconds", "init_rmse"]

ProgressFn = Callable[[int, int], None]


class NoiseFamily(str, Enum):
    NORMAL = "normal"
    LAPLACE = "laplace"


class DenoiseMethod(str, Enum):
    TT_SVD = "tt_svd"
    CONTRACTION_GD = "contraction_gd"
    SAMPLING_V2 = "sampling_v2"
    SAMPLING_V3 = "sampling_v3"


class DenoiseInit(str, Enum):
    TT_SVD = "tt_svd"
    RANDOM = "random"


class MinibatchMode(str, Enum):
    IID = "iid"
    EPOCH = "epoch"


@dataclass(frozen=True)
class NoiseModel:
    family: NoiseFamily
    scale: float
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", NoiseFamily(self.family))
        if self.scale < 0:
            raise ValueError(f"noise scale must be non-negative, got {self.scale}")


@dataclass
class DenoiseConfig:
    shape: TtShape
    gen_rank: int
    fit_rank: int
    noise: NoiseModel
    method: DenoiseMethod
    sched: LrSchedule
    sigma_gt: float = 1.0
    steps: int = 1000
    batch: int = 4096
    seeds: list[int] = field(default_factory=lambda: [0])
    init: DenoiseInit = DenoiseInit.TT_SVD
    minibatch: MinibatchMode = MinibatchMode.IID
    loss: str = "auto"
    laplace_scale_is_std: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        self.method = DenoiseMethod(self.method)
        self.init = DenoiseInit(self.init)
        self.minibatch = MinibatchMode(self.minibatch)
        if self.fit_rank < 1 or self.gen_rank < 1:
            raise ShapeError("ranks must be >= 1")
        if self.method in (DenoiseMethod.SAMPLING_V2, DenoiseMethod.SAMPLING_V3) and self.batch > self.shape.numel:
            raise ShapeError(f"batch {self.batch} exceeds the {self.shape.numel} tensor elements")
        if self.loss not in ("auto", LossKind.L1.value, LossKind.L2.value):
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def loss_kind(self) -> LossKind:
        if self.loss != "auto":
            return LossKind(self.loss)
        return LossKind.L1 if self.noise.family is NoiseFamily.LAPLACE else LossKind.L2


@dataclass
class SeedRun:
    seed: int
    rmse: float
    init_rmse: float
    seconds: float


@dataclass
class DenoiseResult:
    config: DenoiseConfig
    runs: list[SeedRun]

    @property
    def rmses(self) -> list[float]:
        return [r.rmse for r in self.runs]

    @property
    def mean(self) -> float:
        return float(np.mean(self.rmses))

    @property
    def std(self) -> float:
        return float(np.std(self.rmses))

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.runs)


def make_ground_truth(shape: TtShape, r_gen: int, sigma: float, seed: int, dtype=np.float64) -> tuple[TensorTrain, DenseTensor]:
    """Random TT at the clamped-pyramid rank ``r_gen`` and its contraction."""
    rank = clamp_ranks(max_rank_pyramid(shape), r_gen)
    tt = init_random(shape, rank, sigma, seed, dtype)
    return tt, contract(tt)


def add_noise(
    dense: DenseTensor, noise: NoiseModel, rng: Optional[np.random.Generator] = None, scale_is_std: bool = False
) -> DenseTensor:
    """
    Elementwise i.i.d. additive noise.

    Normal uses ``scale`` as the standard deviation. Laplace uses it as the
    scale parameter ``b`` (std ``b * sqrt(2)``) unless ``scale_is_std``.
    """
    data = dense.data
    if noise.scale == 0:
        return DenseTensor(data.copy())
    rng = rng if rng is not None else np.random.default_rng(noise.seed)
    if noise.family is NoiseFamily.NORMAL:
        z = rng.normal(0.0, noise.scale, size=data.shape)
    else:
        b = noise.scale / math.sqrt(2.0) if scale_is_std else noise.scale
        u = rng.uniform(-0.5, 0.5, size=data.shape)
        z = -b * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    return DenseTensor(data + z.astype(data.dtype, copy=False))


def _seed_streams(seed: int) -> tuple[int, np.random.Generator, np.random.Generator, int]:
    gt, noise, batches, init = np.random.SeedSequence(seed).spawn(4)
    return (
        int(gt.generate_state(1)[0]),
        np.random.default_rng(noise),
        np.random.default_rng(batches),
        int(init.generate_state(1)[0]),
    )


def _optimize(
    cfg: DenoiseConfig,
    tt: TensorTrain,
    noisy: DenseTensor,
    batch_rng: np.random.Generator,
    progress: Optional[ProgressFn],
) -> TensorTrain:
    state = AdamState()
    loss_kind = cfg.loss_kind
    payload = cfg.shape.payload
    kind = SamplerKind.V3 if cfg.method is DenoiseMethod.SAMPLING_V3 else SamplerKind.V2
    batches = epoch_batches(cfg.shape, cfg.batch, batch_rng) if cfg.minibatch is MinibatchMode.EPOCH else None

    for step in range(cfg.steps):
        if cfg.method is DenoiseMethod.CONTRACTION_GD:
            pred = contract(tt).data
            loss, g = loss_and_grad(loss_kind, pred.reshape(-1, payload), noisy.data.reshape(-1, payload))
            grads = contract_backward(tt, g.reshape(cfg.shape.extents))
        else:
            batch = next(batches) if batches is not None else uniform_batch(cfg.shape, cfg.batch, batch_rng)
            values, trace = sample_with_trace(tt, batch, kind)
            loss, g = loss_and_grad(loss_kind, values, gather_dense(noisy, batch))
            grads = backward(tt, batch, kind, g, trace)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        adam_step_tt(state, tt, grads, lr_at(cfg.sched, step))
        if progress is not None:
            progress(step + 1, cfg.steps)
    return tt


def run_seed(cfg: DenoiseConfig, seed: int, progress: Optional[ProgressFn] = None) -> SeedRun:
    """One denoising run; RMSE is measured against the noise-free tensor.

    Gradient methods start from the TT-SVD of the noisy tensor unless
    ``cfg.init`` asks for a random start at the fit rank.
    """
    dtype = np.dtype(cfg.dtype)
    gt_seed, noise_rng, batch_rng, init_seed = _seed_streams(seed)
    start = time.perf_counter()
    _, clean = make_ground_truth(cfg.shape, cfg.gen_rank, cfg.sigma_gt, gt_seed, dtype)
    noisy = add_noise(clean, NoiseModel(cfg.noise.family, cfg.noise.scale, seed), noise_rng, cfg.laplace_scale_is_std)

    cap = clamp_ranks(max_rank_pyramid(cfg.shape), cfg.fit_rank)
    if cfg.method is DenoiseMethod.TT_SVD or cfg.init is DenoiseInit.TT_SVD:
        tt = tt_svd(noisy, cfg.shape, cap).astype(dtype)
    else:
        tt = init_random(cfg.shape, cap, cfg.sigma_gt, init_seed, dtype)
    init_rmse = rmse(contract(tt), clean)
    if cfg.method is DenoiseMethod.TT_SVD:
        return SeedRun(seed, init_rmse, init_rmse, time.perf_counter() - start)

    if cfg.method is DenoiseMethod.SAMPLING_V3:
        tt = full_to_reduced(tt)
    tt = _optimize(cfg, tt, noisy, batch_rng, progress)
    final = rmse(contract(tt), clean)
    log.debug("%s seed=%d init_rmse=%.6g rmse=%.6g", cfg.method.value, seed, init_rmse, final)
    return SeedRun(seed, final, init_rmse, time.perf_counter() - start)


def run_denoise(cfg: DenoiseConfig, progress: Optional[ProgressFn] = None) -> DenoiseResult:
    return DenoiseResult(cfg, [run_seed(cfg, s, progress) for s in cfg.seeds])


@dataclass(frozen=True)
class SweepCell:
    method: DenoiseMethod
    family: NoiseFamily
    scale: float
    fit_rank: int
    seed: int


def expand_sweep(sweep: DenoiseSweepConfig) -> list[SweepCell]:
    """Cells in method x family x scale x rank x seed order."""
    try:
        methods = [DenoiseMethod(m) for m in sweep.methods]
        families = [NoiseFamily(f) for f in sweep.families]
        MinibatchMode(sweep.minibatch)
        DenoiseInit(sweep.init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cells = [
        SweepCell(m, f, float(s), r, seed)
        for m in methods
        for f in families
        for s in sweep.scales
        for r in sweep.fit_ranks
        for seed in sweep.seeds
    ]
    for cell in cells:
        try:
            cell_config(sweep, cell)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cells


def cell_config(sweep: DenoiseSweepConfig, cell: SweepCell, dtype: str = "float64") -> DenoiseConfig:
    """Per-cell run config. A TT-SVD start is fine-tuned at the small ``finetune_lr_*`` rates without warmup."""
    shape = TtShape(tuple(sweep.modes), 1)
    if DenoiseInit(sweep.init) is DenoiseInit.TT_SVD:
        sched = LrSchedule(sweep.steps, sweep.finetune_lr_max, sweep.finetune_lr_min, 0.0)
    else:
        sched = LrSchedule(sweep.steps, sweep.lr_max, sweep.lr_min, sweep.warmup_frac)
    return DenoiseConfig(
        shape=shape,
        gen_rank=sweep.gen_rank,
        fit_rank=cell.fit_rank,
        noise=NoiseModel(cell.family, cell.scale, cell.seed),
        method=cell.method,
        sched=sched,
        sigma_gt=sweep.sigma_gt,
        steps=sweep.steps,
        batch=sweep.batch,
        seeds=[cell.seed],
        init=sweep.init,
        minibatch=sweep.minibatch,
        loss=sweep.loss,
        laplace_scale_is_std=sweep.laplace_scale_is_std,
        dtype=dtype,
    )


@dataclass(frozen=True)
class DenoiseRow:
    cell: SweepCell
    r_gen: int
    steps: int
    batch: int
    rmse: float
    init_rmse: float
    seconds: float

    def csv_row(self, timing: bool = True) -> dict:
        return {
            "method": self.cell.method.value,
            "family": self.cell.family.value,
            "scale": f"{self.cell.scale:g}",
            "r_gen": self.r_gen,
            "r_fit": self.cell.fit_rank,
            "steps": 0 if self.cell.method is DenoiseMethod.TT_SVD else self.steps,
            "batch": self.batch,
            "seed": self.cell.seed,
            "rmse": repr(self.rmse),
            "seconds": f"{self.seconds:.6f}" if timing else "0",
            "init_rmse": repr(self.init_rmse),
        }


def _run_cell(args: tuple) -> DenoiseRow:
    sweep, cell, dtype, budget = args
    set_mem_budget(budget)
    cfg = cell_config(sweep, cell, dtype)
    run = run_seed(cfg, cell.seed)
    return DenoiseRow(cell, sweep.gen_rank, sweep.steps, sweep.batch, run.rmse, run.init_rmse, run.seconds)


def run_sweep(
    sweep: DenoiseSweepConfig,
    jobs: int = 1,
    dtype: str = "float64",
    on_row: Optional[Callable[[DenoiseRow], None]] = None,
) -> list[DenoiseRow]:
    """Run every sweep cell; rows come back in cell order whatever ``jobs`` is."""
    cells = expand_sweep(sweep)
    args = [(sweep, cell, dtype, get_mem_budget()) for cell in cells]
    rows = []
    if jobs <= 1:
        for a in args:
            rows.append(_run_cell(a))
            if on_row is not None:
                on_row(rows[-1])
        return rows
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for row in pool.map(_run_cell, args):
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def write_denoise_csv(path: Path, rows: list[DenoiseRow], timing: bool = True) -> Path:
    """Append ``rows``; the header goes in only when the file is new or empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with open(path, newline="") as f:
            header = next(csv.reader(f), [])
        if header != CSV_COLUMNS:
            raise ArtifactIOError(f"{path} has header {header}, expected {CSV_COLUMNS}")
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow(row.csv_row(timing))
    return path


def summarize(rows: list[DenoiseRow]) -> list[tuple]:
    """Mean and std of RMSE per (method, family, scale, r_fit)."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = (row.cell.method.value, row.cell.family.value, row.cell.scale, row.cell.fit_rank)
        groups.setdefault(key, []).append(row.rmse)
    return [(*key, float(np.mean(v)), float(np.std(v)), len(v)) for key, v in groups.items()]


@app.callback(invoke_without_command=True)
def denoise(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Arquivo JSON da varredura"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Diretório de saída"),
    seed: Optional[int] = typer.Option(None, "--seed", "-s", help="Rebase da lista de seeds para N, N+1, ..."),
    jobs: int = typer.Option(1, "--jobs", "-j", help="Processos paralelos"),
    no_timing: bool = typer.Option(False, "--no-timing", help="Zera a coluna de tempo no CSV"),
):
    """
    🧪 Benchmark de denoising (TT-SVD, contração, amostragem v2/v3).
    """
    out = out or default_out("denoise")
    dtype = (ctx.obj or {}).get("dtype", "float64")
    with guarded_run("denoise", out) as manifest:
        sweep = load_config(config, DenoiseSweepConfig)
        sweep.seeds = rebase_seeds(sweep.seeds, seed)
        manifest.config = config_to_dict(sweep)
        manifest.seeds = list(sweep.seeds)
        cells = expand_sweep(sweep)

        console.print(Panel(
            f"[bold cyan]🧪 Denoising[/bold cyan]\n\n"
            f"Tensor: {'x'.join(map(str, sweep.modes))}  |  r_gen={sweep.gen_rank}\n"
            f"[dim]{len(cells)} execuções, {jobs} processo(s), precisão {dtype}[/dim]",
            border_style="cyan",
        ))

        done = 0
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
        ) as progress:
            task = progress.add_task(f"Executando 0/{len(cells)}...", total=len(cells))

            def on_row(row: DenoiseRow):
                nonlocal done
                done += 1
                progress.update(task, advance=1, description=f"Executando {done}/{len(cells)}...")

            rows = run_sweep(sweep, jobs, dtype, on_row)

        csv_path = write_denoise_csv(out / "denoise.csv", rows, timing=not no_timing)
        manifest.artifacts.append(str(csv_path))
        manifest.extra["seconds"] = [r.seconds for r in rows]

        display_table(
            "📉 RMSE por configuração",
            ["Método", "Família", "Escala", "r_fit", "RMSE médio", "Desvio", "Seeds"],
            summarize(rows),
        )
        console.print(f"[green]✓ Resultados gravados em[/green] [cyan]{csv_path}[/cyan]")
