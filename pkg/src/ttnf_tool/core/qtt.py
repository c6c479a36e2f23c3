"""QTT voxel grid: Morton-ordered quantization of a cubic grid and trilinear lookups.

A grid with ``2^D`` voxels per side is stored as a TensorTrain with ``D``
modes of size 8. Level ``k`` (0 is the coarsest) owns bit ``D-1-k`` of each
voxel coordinate and its mode index is ``4*x_k + 2*y_k + z_k``.

Voxel ``i`` has its center at ``(i + 0.5) / 2^D`` of the box extent. The
eight interpolation corners of a point are clamped to the grid.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ttnf_tool.core.sampling import IndexBatch, SamplerKind, SamplingTrace, backward, sample_with_trace
from ttnf_tool.core.tt import (
    DenseTensor,
    TensorTrain,
    TtRank,
    TtShape,
    clamp_ranks,
    contract,
    full_to_reduced,
    init_random,
    max_rank_pyramid,
    tt_svd,
    zeros,
)
from ttnf_tool.errors import ShapeError

log = logging.getLogger(__name__)

QTT_MODE = 8


@dataclass(frozen=True)
class QttGridConfig:
    levels: int
    payload: int = 28
    r_max: int = 64
    box_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    box_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "box_min", tuple(float(v) for v in self.box_min))
        object.__setattr__(self, "box_max", tuple(float(v) for v in self.box_max))
        if self.levels < 1:
            raise ShapeError(f"levels must be >= 1, got {self.levels}")
        if self.payload < 1:
            raise ShapeError(f"payload must be >= 1, got {self.payload}")
        if self.r_max < 1:
            raise ShapeError(f"r_max must be >= 1, got {self.r_max}")
        if len(self.box_min) != 3 or len(self.box_max) != 3:
            raise ShapeError("bounding box corners must be 3-vectors")
        if any(hi <= lo for lo, hi in zip(self.box_min, self.box_max)):
            raise ShapeError(f"bounding box {self.box_min}..{self.box_max} has a non-positive extent")

    @property
    def side(self) -> int:
        return 1 << self.levels

    @property
    def shape(self) -> TtShape:
        return TtShape((QTT_MODE,) * self.levels, self.payload)

    @property
    def rank(self) -> TtRank:
        return clamp_ranks(max_rank_pyramid(self.shape), self.r_max)


def _check_voxels(cfg: QttGridConfig, voxels: np.ndarray) -> None:
    if voxels.shape[-1] != 3:
        raise ShapeError(f"voxel coordinates must have 3 components, got extents {voxels.shape}")
    if np.any(voxels < 0) or np.any(voxels >= cfg.side):
        raise ShapeError(f"voxel coordinate outside [0, {cfg.side})")


def voxel_to_qtt_index(cfg: QttGridConfig, voxels) -> np.ndarray:
    """Map ``(..., 3)`` voxel coordinates to ``(..., D)`` per-level mode indices."""
    v = np.asarray(voxels, dtype=np.int64)
    _check_voxels(cfg, v)
    shifts = np.arange(cfg.levels - 1, -1, -1, dtype=np.int64)
    bits = (v[..., :, None] >> shifts) & 1
    return 4 * bits[..., 0, :] + 2 * bits[..., 1, :] + bits[..., 2, :]


def qtt_index_to_voxel(cfg: QttGridConfig, indices) -> np.ndarray:
    """Inverse of ``voxel_to_qtt_index``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[-1] != cfg.levels:
        raise ShapeError(f"expected {cfg.levels} level indices, got extents {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= QTT_MODE):
        raise ShapeError("level index outside [0, 8)")
    weights = np.int64(1) << np.arange(cfg.levels - 1, -1, -1, dtype=np.int64)
    x = ((idx >> 2) & 1) @ weights
    y = ((idx >> 1) & 1) @ weights
    z = (idx & 1) @ weights
    return np.stack([x, y, z], axis=-1)


def dense_to_qtt(voxels: np.ndarray, levels: int) -> np.ndarray:
    """Reshuffle an ``S x S x S x C`` voxel array into the ``(8,)*D + (C,)`` quantized tensor."""
    voxels = np.asarray(voxels)
    side = 1 << levels
    if voxels.ndim != 4 or voxels.shape[:3] != (side, side, side):
        raise ShapeError(f"expected a {side}^3 x C voxel array, got extents {voxels.shape}")
    c = voxels.shape[3]
    bits = voxels.reshape((2,) * (3 * levels) + (c,))
    order = [axis for k in range(levels) for axis in (k, levels + k, 2 * levels + k)]
    return np.ascontiguousarray(bits.transpose(order + [3 * levels])).reshape((QTT_MODE,) * levels + (c,))


def qtt_to_dense(tensor: np.ndarray, levels: int) -> np.ndarray:
    """Inverse of ``dense_to_qtt``."""
    tensor = np.asarray(tensor)
    if tensor.shape[:-1] != (QTT_MODE,) * levels:
        raise ShapeError(f"expected (8,)*{levels} + (C,) extents, got {tensor.shape}")
    c = tensor.shape[-1]
    side = 1 << levels
    bits = tensor.reshape((2,) * (3 * levels) + (c,))
    order = [axis for k in range(levels) for axis in (k, levels + k, 2 * levels + k)]
    inverse = list(np.argsort(order)) + [3 * levels]
    return np.ascontiguousarray(bits.transpose(inverse)).reshape(side, side, side, c)


@dataclass
class GatherContext:
    voxels: np.ndarray
    kind: SamplerKind
    indices: Optional[np.ndarray] = None
    trace: Optional[SamplingTrace] = None


@dataclass
class QttGrid:
    """Voxel grid whose ``S^3 x C`` payloads live in a QTT."""

    config: QttGridConfig
    tt: TensorTrain

    def __post_init__(self):
        if self.tt.shape != self.config.shape:
            raise ShapeError(f"TT shape {self.tt.shape} does not match grid shape {self.config.shape}")
        if self.tt.rank != self.config.rank:
            raise ShapeError(f"TT rank {self.tt.rank.ranks} is not the grid rank {self.config.rank.ranks}")

    @classmethod
    def random(cls, cfg: QttGridConfig, sigma: float, seed: int, dtype=np.float64) -> "QttGrid":
        return cls(cfg, init_random(cfg.shape, cfg.rank, sigma, seed, dtype))

    @classmethod
    def zeros(cls, cfg: QttGridConfig, dtype=np.float64) -> "QttGrid":
        return cls(cfg, zeros(cfg.shape, cfg.rank, dtype))

    @classmethod
    def from_dense(cls, cfg: QttGridConfig, voxels: np.ndarray) -> "QttGrid":
        """TT-SVD of an ``S^3 x C`` voxel array at the grid's clamped rank."""
        quantized = DenseTensor(dense_to_qtt(voxels, cfg.levels))
        return cls(cfg, tt_svd(quantized, cfg.shape, cfg.rank))

    def to_reduced(self) -> "QttGrid":
        return QttGrid(self.config, full_to_reduced(self.tt))

    def to_dense(self) -> np.ndarray:
        return qtt_to_dense(contract(self.tt).data, self.config.levels)

    def parameters(self) -> dict:
        return dict(enumerate(self.tt.cores))

    @property
    def frozen(self) -> frozenset:
        return frozenset(k for k, fixed in enumerate(self.tt.identity_mask) if fixed)

    def gather(self, voxels: np.ndarray, kind: SamplerKind = SamplerKind.V2) -> tuple[np.ndarray, GatherContext]:
        indices = voxel_to_qtt_index(self.config, voxels)
        values, trace = sample_with_trace(self.tt, IndexBatch(indices), kind, record=True)
        return values, GatherContext(voxels, SamplerKind(kind), indices, trace)

    def gather_backward(self, ctx: GatherContext, upstream: np.ndarray) -> dict:
        return backward(self.tt, ctx.indices, ctx.kind, upstream, ctx.trace)


@dataclass
class DenseVoxelGrid:
    """Uncompressed ``S^3 x C`` grid with the same lookup interface as ``QttGrid``."""

    config: QttGridConfig
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        side = self.config.side
        expected = (side, side, side, self.config.payload)
        if self.data.shape != expected:
            raise ShapeError(f"voxel array extents {self.data.shape} != {expected}")

    @classmethod
    def zeros(cls, cfg: QttGridConfig, dtype=np.float64) -> "DenseVoxelGrid":
        return cls(cfg, np.zeros((cfg.side,) * 3 + (cfg.payload,), dtype=dtype))

    @classmethod
    def random(cls, cfg: QttGridConfig, sigma: float, seed: int, dtype=np.float64) -> "DenseVoxelGrid":
        rng = np.random.default_rng(seed)
        return cls(cfg, rng.normal(0.0, sigma, size=(cfg.side,) * 3 + (cfg.payload,)).astype(dtype))

    def to_dense(self) -> np.ndarray:
        return self.data.copy()

    def parameters(self) -> dict:
        return {"data": self.data}

    @property
    def frozen(self) -> frozenset:
        return frozenset()

    def gather(self, voxels: np.ndarray, kind: SamplerKind = SamplerKind.V2) -> tuple[np.ndarray, GatherContext]:
        v = np.asarray(voxels, dtype=np.int64)
        _check_voxels(self.config, v)
        return self.data[v[:, 0], v[:, 1], v[:, 2]], GatherContext(v, SamplerKind(kind))

    def gather_backward(self, ctx: GatherContext, upstream: np.ndarray) -> dict:
        grad = np.zeros_like(self.data)
        np.add.at(grad, (ctx.voxels[:, 0], ctx.voxels[:, 1], ctx.voxels[:, 2]), upstream)
        return {"data": grad}


@dataclass
class TrilinearContext:
    weights: np.ndarray
    gather: GatherContext


def _corner_offsets() -> np.ndarray:
    return np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


def trilinear_sample(
    grid, points, kind: SamplerKind = SamplerKind.V2
) -> tuple[np.ndarray, TrilinearContext]:
    """Blend the 8 surrounding voxel payloads of each world-space point.

    All ``8B`` corners go through a single ``grid.gather`` call.
    """
    cfg = grid.config
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be B x 3, got extents {pts.shape}")
    lo = np.asarray(cfg.box_min)
    hi = np.asarray(cfg.box_max)
    outside = np.any((pts < lo) | (pts > hi), axis=1)
    if np.any(outside):
        raise ShapeError(f"{int(outside.sum())} point(s) outside the bounding box")

    side = cfg.side
    u = (pts - lo) / (hi - lo) * side - 0.5
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    offsets = _corner_offsets()
    voxels = np.clip(base[None, :, :] + offsets[:, None, :], 0, side - 1)
    weights = np.prod(np.where(offsets[:, None, :] == 1, frac[None], 1.0 - frac[None]), axis=2)

    values, gather_ctx = grid.gather(voxels.reshape(-1, 3), kind)
    values = values.reshape(8, pts.shape[0], -1)
    out = np.einsum("cb,cbp->bp", weights, values)
    return out, TrilinearContext(weights, gather_ctx)


def trilinear_backward(grid, ctx: TrilinearContext, upstream: np.ndarray) -> dict:
    """Gradients of ``sum(upstream * trilinear_sample(...))`` for the grid parameters."""
    upstream = np.asarray(upstream)
    per_corner = ctx.weights[:, :, None] * upstream[None, :, :]
    return grid.gather_backward(ctx.gather, per_corner.reshape(-1, upstream.shape[1]))


def sample_voxels(grid: QttGrid, voxels: Sequence, kind: SamplerKind = SamplerKind.V2) -> np.ndarray:
    """Payloads at integer voxel coordinates."""
    v = np.atleast_2d(np.asarray(voxels, dtype=np.int64))
    return grid.gather(v, kind)[0]
