"""Synthetic scenes, scene I/O and the grid-fitting loops.

Ground-truth images of a synthetic scene are rendered from its dense voxel
grid with the same renderer used for fitting, so a perfect fit is attainable.
Camera ``i`` is held out for testing when ``i % 4 == 3``.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ttnf_tool.core.optim import AdamState, LossKind, LrSchedule, adam_step, loss_and_grad, lr_at
from ttnf_tool.core.qtt import DenseVoxelGrid, QttGrid, QttGridConfig
from ttnf_tool.core.render import (
    RENDER_PAYLOAD,
    SH_C0,
    SH_C1,
    SH_DEGREE_TERMS,
    Camera,
    RayBatch,
    RenderConfig,
    generate_rays,
    intersect_box,
    march_backward,
    march_rays,
    psnr,
    render_image,
)
from ttnf_tool.core.sampling import SamplerKind
from ttnf_tool.errors import ArtifactIOError, NumericalError, ShapeError
from ttnf_tool.utils.images import load_image, save_image

log = logging.getLogger(__name__)

RAW_DENSITY_EMPTY = -30.0
RAW_DENSITY_FULL = 20.0
DIRECTIONAL_TINT = 0.25
MIN_CAMERAS = 8
SCENE_FILE = "scene.json"
GRID_FILE = "grid.npy"

ProgressFn = Callable[[int, int], None]


class SceneKind(str, Enum):
    SPHERE = "sphere"
    TWO_BOXES = "two_boxes"
    EMPTY = "empty"


class GridInit(str, Enum):
    RANDOM = "random"
    TT_SVD = "tt_svd"
    TT_SVD_TRAINED = "tt_svd_trained"


@dataclass
class Scene:
    kind: str
    config: QttGridConfig
    voxels: np.ndarray = field(repr=False)
    cameras: list[Camera]
    images: list[np.ndarray] = field(repr=False)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    samples_per_ray: int = 64

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ShapeError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ShapeError(f"image extents {img.shape} do not match camera {cam.height}x{cam.width}")

    @property
    def test_views(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i % 4 == 3]

    @property
    def train_views(self) -> list[int]:
        return [i for i in range(len(self.cameras)) if i % 4 != 3]

    def grid_config(self, r_max: int) -> QttGridConfig:
        return replace(self.config, r_max=r_max)

    def dense_grid(self) -> DenseVoxelGrid:
        return DenseVoxelGrid(self.config, self.voxels)

    def save(self, directory: Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cams = []
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            name = f"view_{i:03d}.ppm"
            save_image(directory / name, img)
            cams.append({**cam.to_dict(), "image": name})
        np.save(directory / GRID_FILE, self.voxels)
        doc = {
            "kind": self.kind,
            "levels": self.config.levels,
            "box_min": list(self.config.box_min),
            "box_max": list(self.config.box_max),
            "background": list(self.background),
            "samples_per_ray": self.samples_per_ray,
            "grid": GRID_FILE,
            "cameras": cams,
        }
        path = directory / SCENE_FILE
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def load(cls, directory: Path) -> "Scene":
        directory = Path(directory)
        path = directory / SCENE_FILE if directory.is_dir() else directory
        if not path.exists():
            raise ArtifactIOError(f"scene description not found: {path}")
        try:
            doc = json.loads(path.read_text())
            cfg = QttGridConfig(
                int(doc["levels"]), RENDER_PAYLOAD, box_min=tuple(doc["box_min"]), box_max=tuple(doc["box_max"])
            )
            cameras = [Camera.from_dict(c) for c in doc["cameras"]]
            images = [load_image(path.parent / c["image"]) for c in doc["cameras"]]
            voxels = np.load(path.parent / doc["grid"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, OSError) as exc:
            raise ArtifactIOError(f"invalid scene {path}: {exc}") from exc
        return cls(
            doc.get("kind", "custom"),
            cfg,
            voxels,
            cameras,
            images,
            tuple(doc.get("background", (1.0, 1.0, 1.0))),
            int(doc.get("samples_per_ray", 64)),
        )


def _soft_inside(signed_depth: np.ndarray, edge: float) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * signed_depth / edge))


def _logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def synthetic_voxels(kind: SceneKind, cfg: QttGridConfig) -> np.ndarray:
    """Procedural ``S^3 x 28`` payloads: soft-edged solids with a constant albedo and a small view tint."""
    kind = SceneKind(kind)
    side = cfg.side
    lo = np.asarray(cfg.box_min)
    hi = np.asarray(cfg.box_max)
    axes = [lo[a] + (np.arange(side) + 0.5) / side * (hi[a] - lo[a]) for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    edge = 0.5 * float(np.min(hi - lo)) / side

    if kind is SceneKind.SPHERE:
        radius = 0.5 * float(np.min(half))
        occ = _soft_inside(radius - np.linalg.norm(pts - center, axis=-1), edge)
        albedo_logits = np.broadcast_to(_logit([0.9, 0.3, 0.2]), pts.shape)
    elif kind is SceneKind.TWO_BOXES:
        boxes = [
            (center + half * [-0.35, 0.0, 0.0], half * [0.25, 0.25, 0.25], [0.2, 0.6, 0.9]),
            (center + half * [0.35, 0.1, -0.1], half * [0.2, 0.3, 0.2], [0.9, 0.8, 0.2]),
        ]
        occs = [
            np.prod(_soft_inside(size - np.abs(pts - c), edge), axis=-1) for c, size, _ in boxes
        ]
        occ = np.maximum(occs[0], occs[1])
        share = occs[0] / np.maximum(occs[0] + occs[1], 1e-12)
        albedo_logits = share[..., None] * _logit(boxes[0][2]) + (1.0 - share[..., None]) * _logit(boxes[1][2])
    else:
        occ = np.zeros(pts.shape[:-1])
        albedo_logits = np.zeros(pts.shape)

    voxels = np.zeros((side, side, side, cfg.payload))
    voxels[..., 0] = RAW_DENSITY_EMPTY + (RAW_DENSITY_FULL - RAW_DENSITY_EMPTY) * occ
    sh = np.zeros((side, side, side, 3, SH_DEGREE_TERMS))
    sh[..., 0] = albedo_logits / SH_C0
    sh[..., 2] = DIRECTIONAL_TINT / SH_C1
    voxels[..., 1:RENDER_PAYLOAD] = sh.reshape(side, side, side, 3 * SH_DEGREE_TERMS)
    return voxels


def orbit_cameras(cfg: QttGridConfig, count: int, image_size: int, elevation_deg: float = 30.0) -> list[Camera]:
    """``count`` cameras on a circle around the box center, all looking at it."""
    lo = np.asarray(cfg.box_min)
    hi = np.asarray(cfg.box_max)
    center = 0.5 * (lo + hi)
    distance = 3.0 * float(np.max(0.5 * (hi - lo)))
    focal = 0.5 * image_size / math.tan(math.radians(22.5))
    el = math.radians(elevation_deg)
    cams = []
    for i in range(count):
        az = 2.0 * math.pi * i / count
        eye = center + distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, center, (0.0, 0.0, 1.0), focal, image_size, image_size))
    return cams


def make_synthetic_scene(
    kind: SceneKind,
    levels: int,
    num_cameras: int = MIN_CAMERAS,
    image_size: int = 32,
    samples_per_ray: int = 64,
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
    box_min: tuple[float, float, float] = (-1.0, -1.0, -1.0),
    box_max: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Scene:
    """Dense grid, orbiting cameras and ground-truth renders of the grid itself."""
    if num_cameras < MIN_CAMERAS:
        raise ValueError(f"a synthetic scene needs at least {MIN_CAMERAS} cameras, got {num_cameras}")
    kind = SceneKind(kind)
    cfg = QttGridConfig(levels, RENDER_PAYLOAD, box_min=box_min, box_max=box_max)
    voxels = synthetic_voxels(kind, cfg)
    cameras = orbit_cameras(cfg, num_cameras, image_size)
    render_cfg = RenderConfig(samples_per_ray=samples_per_ray, background=background)
    oracle = DenseVoxelGrid(cfg, voxels)
    images = [render_image(oracle, cam, render_cfg) for cam in cameras]
    log.info("synthetic scene %s: %d^3 voxels, %d views", kind.value, cfg.side, num_cameras)
    return Scene(kind.value, cfg, voxels, cameras, images, tuple(background), samples_per_ray)


@dataclass(frozen=True)
class FitLogEntry:
    step: int
    split: str
    psnr: float
    loss: float
    seconds: float


@dataclass
class FitResult:
    grid: object
    log: list[FitLogEntry]


@dataclass(frozen=True)
class ViewScore:
    view: int
    split: str
    psnr: float


@dataclass
class _RayPool:
    rays: RayBatch
    t_near: np.ndarray
    t_far: np.ndarray
    targets: np.ndarray

    @property
    def count(self) -> int:
        return self.rays.count


def _training_rays(scene: Scene, views: list[int]) -> _RayPool:
    origins, dirs, near, far, targets = [], [], [], [], []
    for i in views:
        rays = generate_rays(scene.cameras[i])
        hit, t_near, t_far = intersect_box(rays, scene.config.box_min, scene.config.box_max)
        origins.append(rays.origins[hit])
        dirs.append(rays.directions[hit])
        near.append(t_near[hit])
        far.append(t_far[hit])
        targets.append(scene.images[i].reshape(-1, 3)[hit])
    pool = _RayPool(
        RayBatch(np.concatenate(origins), np.concatenate(dirs)),
        np.concatenate(near),
        np.concatenate(far),
        np.concatenate(targets),
    )
    if pool.count == 0:
        raise ShapeError("no training ray hits the grid box")
    return pool


def channel_lr_scale(grid, cfg: RenderConfig) -> Optional[dict]:
    """Per-parameter learning-rate multipliers for the density and SH channel groups.

    A QTT grid can only scale channels on its last core. When that core is an
    identity (reduced form) the groups share one rate.
    """
    vec = np.array([cfg.lr_density_scale] + [cfg.lr_sh_scale] * (3 * SH_DEGREE_TERMS))
    if isinstance(grid, DenseVoxelGrid):
        return {"data": vec}
    last = grid.tt.ndim - 1
    if last in grid.frozen:
        if cfg.lr_density_scale != cfg.lr_sh_scale:
            log.warning("payload core is an identity; density/SH learning-rate groups are ignored")
        return None
    return {last: vec}


def fit_scene(
    grid,
    scene: Scene,
    cfg: RenderConfig,
    kind: SamplerKind = SamplerKind.V2,
    progress: Optional[ProgressFn] = None,
) -> FitResult:
    """Fit ``grid`` in place to the training views with L2 loss on ray colors.

    Train PSNR of the current batch is logged every ``cfg.log_every`` steps and
    at the last step.
    """
    entries: list[FitLogEntry] = []
    if cfg.steps == 0:
        return FitResult(grid, entries)
    pool = _training_rays(scene, scene.train_views)
    sched = LrSchedule(cfg.steps, cfg.lr_max, cfg.lr_min, cfg.warmup_frac)
    lr_scale = channel_lr_scale(grid, cfg)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    jitter_rng = np.random.default_rng(cfg.seed + 1) if cfg.jitter else None
    params = grid.parameters()
    start = time.perf_counter()

    for step in range(cfg.steps):
        rows = rng.integers(0, pool.count, size=cfg.rays_per_batch)
        rgb, ctx = march_rays(
            grid, pool.rays.subset(rows), pool.t_near[rows], pool.t_far[rows], cfg, kind, jitter_rng
        )
        loss, d_rgb = loss_and_grad(LossKind.L2, rgb, pool.targets[rows])
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}")
        grads = march_backward(grid, ctx, d_rgb)
        adam_step(state, params, grads, lr_at(sched, step), lr_scale, grid.frozen)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            train_psnr = math.inf if loss == 0.0 else 10.0 * math.log10(1.0 / loss)
            entries.append(FitLogEntry(step, "train", train_psnr, loss, time.perf_counter() - start))
            log.debug("step %d loss %.6g psnr %.3f", step, loss, train_psnr)
        if progress is not None:
            progress(step + 1, cfg.steps)
    return FitResult(grid, entries)


def fit_dense_grid(
    scene: Scene,
    cfg: RenderConfig,
    lr_sh: float = 1e-1,
    lr_density: float = 1e1,
    progress: Optional[ProgressFn] = None,
) -> FitResult:
    """Train an uncompressed grid from zeros with the SH/density rates of the uncompressed setup."""
    grid = DenseVoxelGrid.zeros(scene.config)
    dense_cfg = replace(
        cfg,
        lr_max=1.0,
        lr_min=cfg.lr_min / cfg.lr_max if cfg.lr_max > 0 else 0.0,
        lr_density_scale=lr_density,
        lr_sh_scale=lr_sh,
    )
    return fit_scene(grid, scene, dense_cfg, progress=progress)


def init_grid(
    scene: Scene,
    r_max: int,
    init: GridInit = GridInit.RANDOM,
    sigma: float = 0.1,
    seed: int = 0,
    kind: SamplerKind = SamplerKind.V2,
    dense_cfg: Optional[RenderConfig] = None,
) -> QttGrid:
    """Random or TT-SVD initialized QTT grid, reduced when ``kind`` is ``v3``."""
    init = GridInit(init)
    cfg = scene.grid_config(r_max)
    if init is GridInit.RANDOM:
        grid = QttGrid.random(cfg, sigma, seed)
    elif init is GridInit.TT_SVD:
        grid = QttGrid.from_dense(cfg, scene.voxels)
    else:
        trained = fit_dense_grid(scene, dense_cfg or RenderConfig(samples_per_ray=scene.samples_per_ray))
        grid = QttGrid.from_dense(cfg, trained.grid.data)
    if SamplerKind(kind) is SamplerKind.V3:
        grid = grid.to_reduced()
    return grid


def evaluate_views(
    grid,
    scene: Scene,
    cfg: RenderConfig,
    kind: SamplerKind = SamplerKind.V2,
    views: Optional[list[int]] = None,
) -> list[ViewScore]:
    """PSNR of each view against the scene images, tagged train/test."""
    views = list(range(len(scene.cameras))) if views is None else views
    test = set(scene.test_views)
    scores = []
    for i in views:
        image = render_image(grid, scene.cameras[i], cfg, kind)
        scores.append(ViewScore(i, "test" if i in test else "train", psnr(image, scene.images[i])))
    return scores


def mean_psnr(scores: list[ViewScore], split: str) -> float:
    values = [s.psnr for s in scores if s.split == split]
    return float(np.mean(values)) if values else math.nan
