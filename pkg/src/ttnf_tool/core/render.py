"""Differentiable volume rendering over a voxel field.

Payload layout per voxel: ``[density, r_0..r_8, g_0..g_8, b_0..b_8]``. Colors
are the sigmoid of a degree-2 real spherical-harmonics expansion evaluated at
the ray direction. Samples sit at segment midpoints between the ray's box
entry and exit, and are composited front to back with the residual
transmittance weighting the background.

Cameras follow the pinhole convention with the camera looking down its local
``-z`` axis, ``+x`` to the right and ``+y`` up.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from ttnf_tool.core.qtt import TrilinearContext, trilinear_backward, trilinear_sample
from ttnf_tool.core.sampling import SamplerKind
from ttnf_tool.errors import ShapeError

log = logging.getLogger(__name__)

SH_DEGREE_TERMS = 9
RENDER_PAYLOAD = 1 + 3 * SH_DEGREE_TERMS
PSNR_CAP = 99.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    1.0925484305920792,
    0.31539156525252005,
    1.0925484305920792,
    0.5462742152960396,
)

Image = np.ndarray


class DensityActivation(str, Enum):
    SOFTPLUS = "softplus"
    RELU = "relu"


@dataclass
class RenderConfig:
    samples_per_ray: int = 512
    rays_per_batch: int = 4096
    activation: DensityActivation = DensityActivation.SOFTPLUS
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    steps: int = 2000
    lr_max: float = 3e-3
    lr_min: float = 3e-5
    warmup_frac: float = 0.05
    lr_density_scale: float = 1.0
    lr_sh_scale: float = 1.0
    log_every: int = 100
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        self.activation = DensityActivation(self.activation)
        self.background = tuple(float(c) for c in self.background)
        if self.samples_per_ray < 1:
            raise ValueError(f"samples_per_ray must be >= 1, got {self.samples_per_ray}")
        if self.rays_per_batch < 1:
            raise ValueError(f"rays_per_batch must be >= 1, got {self.rays_per_batch}")
        if len(self.background) != 3:
            raise ValueError("background must be an RGB triple")


@dataclass
class Camera:
    """Pinhole camera with a camera-to-world rigid ``pose`` (4x4)."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.focal <= 0:
            raise ShapeError(f"focal length must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise ShapeError(f"image size must be positive, got {self.width}x{self.height}")
        if self.pose.shape != (4, 4):
            raise ShapeError(f"pose must be 4x4, got {self.pose.shape}")
        rot = self.pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or not np.allclose(self.pose[3], [0, 0, 0, 1]):
            raise ShapeError("pose is not a rigid transform")

    @classmethod
    def look_at(
        cls, eye, target, up, focal: float, width: int, height: int
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = true_up
        pose[:3, 2] = back
        pose[:3, 3] = eye
        return cls(focal, width / 2.0, height / 2.0, width, height, pose)

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "pose": [float(v) for v in self.pose.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        pose = np.asarray(data["pose"], dtype=np.float64).reshape(4, 4)
        return cls(float(data["focal"]), float(data["cx"]), float(data["cy"]), int(data["width"]), int(data["height"]), pose)


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)
        if self.origins.shape != self.directions.shape or self.origins.ndim != 2 or self.origins.shape[1] != 3:
            raise ShapeError(f"rays need matching B x 3 origins and directions, got {self.origins.shape}")

    @property
    def count(self) -> int:
        return self.origins.shape[0]

    def subset(self, rows) -> "RayBatch":
        return RayBatch(self.origins[rows], self.directions[rows])


def generate_rays(cam: Camera) -> RayBatch:
    """One ray per pixel center, row-major over the image."""
    v, u = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    local = np.stack([(u - cam.cx) / cam.focal, -(v - cam.cy) / cam.focal, -np.ones_like(u)], axis=-1)
    dirs = local.reshape(-1, 3) @ cam.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.pose[:3, 3], dirs.shape).copy()
    return RayBatch(origins, dirs)


def intersect_box(rays: RayBatch, box_min, box_max) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test. Returns ``(hit, t_near, t_far)`` with the interval clipped to ``t >= 0``."""
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    o = rays.origins
    d = rays.directions
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    t1 = np.where(parallel, -np.inf, t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.maximum(np.minimum(t1, t2).max(axis=1), 0.0)
    t_far = np.maximum(t1, t2).min(axis=1)
    return t_far > t_near, t_near, t_far


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis up to degree 2 evaluated at unit directions, ``B x 9``."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (3.0 * z * z - 1.0),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ],
        axis=1,
    )


def sh_shade(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """RGB before the sigmoid: per channel, 9 coefficients dotted with the SH basis."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    single = coeffs.ndim == 1
    coeffs = np.atleast_2d(coeffs)
    dirs = np.atleast_2d(dirs)
    if coeffs.shape[1] != 3 * SH_DEGREE_TERMS:
        raise ShapeError(f"expected {3 * SH_DEGREE_TERMS} SH coefficients, got {coeffs.shape[1]}")
    rgb = np.einsum("bcj,bj->bc", coeffs.reshape(-1, 3, SH_DEGREE_TERMS), sh_basis(dirs))
    return rgb[0] if single else rgb


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate_density(raw: np.ndarray, activation: DensityActivation) -> np.ndarray:
    if activation is DensityActivation.RELU:
        return np.maximum(raw, 0.0)
    return np.logaddexp(0.0, raw)


def _activation_grad(raw: np.ndarray, activation: DensityActivation) -> np.ndarray:
    if activation is DensityActivation.RELU:
        return (raw > 0).astype(raw.dtype)
    return sigmoid(raw)


@dataclass
class Composite:
    """Front-to-back compositing of ``B`` rays with ``N`` samples each."""

    rgb: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    residual: np.ndarray


def composite(sigma: np.ndarray, delta: np.ndarray, colors: np.ndarray, background) -> Composite:
    """``rgb = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_{N+1} * background``."""
    s = sigma * delta
    cum = np.cumsum(s, axis=1)
    trans = np.exp(-(cum - s))
    weights = trans * -np.expm1(-s)
    residual = np.exp(-cum[:, -1])
    rgb = np.einsum("bn,bnc->bc", weights, colors) + residual[:, None] * np.asarray(background)
    return Composite(rgb, weights, trans, residual)


def composite_backward(
    sigma: np.ndarray, delta: np.ndarray, colors: np.ndarray, background, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * rgb)`` with respect to ``sigma`` and ``colors``."""
    comp = composite(sigma, delta, colors, background)
    s = sigma * delta
    after = np.exp(-np.cumsum(s, axis=1))
    e = np.einsum("bnc,bc->bn", colors, upstream)
    e_bg = upstream @ np.asarray(background)
    we = comp.weights * e
    later = np.cumsum(we[:, ::-1], axis=1)[:, ::-1] - we
    d_s = after * e - later - comp.residual[:, None] * e_bg[:, None]
    d_colors = comp.weights[:, :, None] * upstream[:, None, :]
    return d_s * delta, d_colors


@dataclass
class MarchContext:
    rays: RayBatch
    delta: np.ndarray
    raw: np.ndarray
    sigma: np.ndarray
    colors: np.ndarray
    basis: np.ndarray
    trilinear: TrilinearContext
    activation: DensityActivation
    background: tuple


def sample_points(
    rays: RayBatch, t_near: np.ndarray, t_far: np.ndarray, n: int, rng: Optional[np.random.Generator] = None
) -> tuple[np.ndarray, np.ndarray]:
    """``B x N x 3`` sample positions and per-ray segment lengths."""
    if rng is None:
        offsets = np.broadcast_to((np.arange(n) + 0.5) / n, (rays.count, n))
    else:
        offsets = (np.arange(n) + rng.uniform(0.0, 1.0, size=(rays.count, n))) / n
    span = t_far - t_near
    t = t_near[:, None] + offsets * span[:, None]
    points = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
    return points, span / n


def march_rays(
    grid,
    rays: RayBatch,
    t_near: np.ndarray,
    t_far: np.ndarray,
    cfg: RenderConfig,
    kind: SamplerKind = SamplerKind.V2,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, MarchContext]:
    """Render ``B`` rays that hit the grid box. Returns ``B x 3`` colors."""
    gcfg = grid.config
    if gcfg.payload != RENDER_PAYLOAD:
        raise ShapeError(f"rendering needs {RENDER_PAYLOAD} payload channels, grid has {gcfg.payload}")
    if np.any(t_far <= t_near):
        raise ShapeError("march_rays received rays that miss the box")
    n = cfg.samples_per_ray
    points, delta = sample_points(rays, t_near, t_far, n, rng if cfg.jitter else None)
    points = np.clip(points, gcfg.box_min, gcfg.box_max)

    payload, tri_ctx = trilinear_sample(grid, points.reshape(-1, 3), kind)
    raw = payload[:, 0].reshape(rays.count, n)
    sigma = activate_density(raw, cfg.activation)
    dirs = np.repeat(rays.directions, n, axis=0)
    basis = sh_basis(dirs)
    raw_rgb = np.einsum("bcj,bj->bc", payload[:, 1:].reshape(-1, 3, SH_DEGREE_TERMS), basis)
    colors = sigmoid(raw_rgb).reshape(rays.count, n, 3)

    comp = composite(sigma, delta[:, None], colors, cfg.background)
    ctx = MarchContext(rays, delta, raw, sigma, colors, basis, tri_ctx, cfg.activation, cfg.background)
    return comp.rgb, ctx


def march_ray(
    grid, origin, direction, cfg: RenderConfig, kind: SamplerKind = SamplerKind.V2
) -> tuple[np.ndarray, MarchContext]:
    """Single-ray form of ``march_rays``. Callers filter misses first; a miss raises ``ShapeError``."""
    rays = RayBatch(np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None])
    hit, t_near, t_far = intersect_box(rays, grid.config.box_min, grid.config.box_max)
    if not hit[0]:
        raise ShapeError("ray misses the grid box")
    rgb, ctx = march_rays(grid, rays, t_near, t_far, cfg, kind)
    return rgb[0], ctx


def march_backward(grid, ctx: MarchContext, upstream: np.ndarray) -> dict:
    """Gradients of ``sum(upstream * rgb)`` for the grid parameters."""
    d_sigma, d_colors = composite_backward(ctx.sigma, ctx.delta[:, None], ctx.colors, ctx.background, upstream)
    d_raw = (d_sigma * _activation_grad(ctx.raw, ctx.activation)).reshape(-1, 1)
    c = ctx.colors.reshape(-1, 3)
    d_raw_rgb = d_colors.reshape(-1, 3) * c * (1.0 - c)
    d_coeffs = d_raw_rgb[:, :, None] * ctx.basis[:, None, :]
    d_payload = np.concatenate([d_raw, d_coeffs.reshape(-1, 3 * SH_DEGREE_TERMS)], axis=1)
    return trilinear_backward(grid, ctx.trilinear, d_payload)


def psnr(a: Image, b: Image) -> float:
    """Peak-1 PSNR in dB; identical images give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image extents differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def render_rays(grid, rays: RayBatch, cfg: RenderConfig, kind: SamplerKind = SamplerKind.V2) -> np.ndarray:
    """Colors of arbitrary rays; misses get the background. Marches in chunks of ``rays_per_batch``."""
    hit, t_near, t_far = intersect_box(rays, grid.config.box_min, grid.config.box_max)
    out = np.broadcast_to(np.asarray(cfg.background), (rays.count, 3)).copy()
    rows = np.flatnonzero(hit)
    rng = np.random.default_rng(cfg.seed) if cfg.jitter else None
    for start in range(0, rows.size, cfg.rays_per_batch):
        chunk = rows[start : start + cfg.rays_per_batch]
        rgb, _ = march_rays(grid, rays.subset(chunk), t_near[chunk], t_far[chunk], cfg, kind, rng)
        out[chunk] = rgb
    return out


def render_image(grid, cam: Camera, cfg: RenderConfig, kind: SamplerKind = SamplerKind.V2) -> Image:
    """``H x W x 3`` image in ``[0, 1]``."""
    rgb = render_rays(grid, generate_rays(cam), cfg, kind)
    return np.clip(rgb.reshape(cam.height, cam.width, 3), 0.0, 1.0)
