"""Block tensor-train: rank selection, initialization, evaluation, contraction and TT-SVD.

All indices are 0-based. Core ``k`` has extents ``R_k x M_k x R_{k+1}`` with
``R_0 = 1`` and ``R_D = payload`` (the block dimension).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from ttnf_tool.errors import MemoryBudgetError, NumericalError, RankPatternError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_MEM_BUDGET = 2**28

_mem_budget = DEFAULT_MEM_BUDGET


def get_mem_budget() -> int:
    """Current element budget for dense materializations."""
    return _mem_budget


def set_mem_budget(elements: Optional[int]) -> None:
    """Override the element budget (``None`` restores the default)."""
    global _mem_budget
    if elements is not None and elements < 1:
        raise ValueError("memory budget must be positive")
    _mem_budget = DEFAULT_MEM_BUDGET if elements is None else int(elements)


def check_budget(what: str, needed: int) -> None:
    if needed > _mem_budget:
        raise MemoryBudgetError(what, needed, _mem_budget)


@dataclass(frozen=True)
class TtShape:
    """Modes ``M_1..M_D`` of the virtual tensor plus the payload size ``R_D``."""

    modes: tuple[int, ...]
    payload: int = 1

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "payload", int(self.payload))
        if not self.modes:
            raise ShapeError("a TT needs at least one mode")
        if any(m < 1 for m in self.modes):
            raise ShapeError(f"modes must be positive: {self.modes}")
        if self.payload < 1:
            raise ShapeError(f"payload must be positive: {self.payload}")

    @property
    def ndim(self) -> int:
        return len(self.modes)

    @property
    def numel(self) -> int:
        """Number of grid cells (payload excluded)."""
        return math.prod(self.modes)

    @property
    def extents(self) -> tuple[int, ...]:
        return self.modes + (self.payload,)


@dataclass(frozen=True)
class TtRank:
    """TT-rank tuple ``(R_0, ..., R_D)``."""

    ranks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if len(self.ranks) < 2 or any(r < 1 for r in self.ranks):
            raise ShapeError(f"invalid TT-rank {self.ranks}")

    def __getitem__(self, k: int) -> int:
        return self.ranks[k]

    def __len__(self) -> int:
        return len(self.ranks)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ranks)

    @property
    def r_max(self) -> int:
        return max(self.ranks)


def validate_rank(shape: TtShape, rank: TtRank) -> None:
    """Raise ``ShapeError`` unless ``rank`` is admissible for ``shape``."""
    D = shape.ndim
    if len(rank) != D + 1:
        raise ShapeError(f"rank {rank.ranks} has {len(rank)} entries, expected {D + 1}")
    if rank[0] != 1:
        raise ShapeError(f"R_0 must be 1, got {rank[0]}")
    if rank[D] != shape.payload:
        raise ShapeError(f"R_D must equal payload {shape.payload}, got {rank[D]}")
    for k in range(1, D):
        if rank[k] > rank[k - 1] * shape.modes[k - 1] or rank[k] > shape.modes[k] * rank[k + 1]:
            raise ShapeError(f"rank {rank.ranks} is inconsistent with modes {shape.modes} at position {k}")


def max_rank_pyramid(shape: TtShape) -> TtRank:
    """Maximal admissible TT-rank: ``R_k = min(prod M[:k], payload * prod M[k:])``."""
    modes = shape.modes
    ranks = [1]
    for k in range(1, shape.ndim):
        ranks.append(min(math.prod(modes[:k]), shape.payload * math.prod(modes[k:])))
    ranks.append(shape.payload)
    return TtRank(tuple(ranks))


def clamp_ranks(pyramid: TtRank, r_max: int) -> TtRank:
    """Clamp interior ranks at ``r_max``; endpoints are kept."""
    if r_max < 1:
        raise ShapeError(f"r_max must be >= 1, got {r_max}")
    ranks = pyramid.ranks
    if len(ranks) <= 2:
        return pyramid
    return TtRank((ranks[0],) + tuple(min(r, r_max) for r in ranks[1:-1]) + (ranks[-1],))


def identity_core(r_left: int, mode: int, r_right: int, side: str, dtype=np.float64) -> np.ndarray:
    """Reshaped identity whose left (``side="left"``) or right matricization is ``I``."""
    if side == "left":
        if r_left * mode != r_right:
            raise ShapeError(f"left matricization of {r_left}x{mode}x{r_right} is not square")
        return np.eye(r_right, dtype=dtype).reshape(r_left, mode, r_right)
    if side == "right":
        if r_left != mode * r_right:
            raise ShapeError(f"right matricization of {r_left}x{mode}x{r_right} is not square")
        return np.eye(r_left, dtype=dtype).reshape(r_left, mode, r_right)
    raise ValueError(f"unknown side {side!r}")


def _is_identity(core: np.ndarray) -> bool:
    r_l, m, r_r = core.shape
    if r_l * m == r_r and np.array_equal(core.reshape(r_r, r_r), np.eye(r_r)):
        return True
    return r_l == m * r_r and np.array_equal(core.reshape(r_l, r_l), np.eye(r_l))


@dataclass
class TensorTrain:
    """Block-TT: ``D`` dense cores plus a mask of cores fixed to reshaped identities."""

    shape: TtShape
    rank: TtRank
    cores: list[np.ndarray]
    identity_mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        validate_rank(self.shape, self.rank)
        D = self.shape.ndim
        if len(self.cores) != D:
            raise ShapeError(f"expected {D} cores, got {len(self.cores)}")
        if not self.identity_mask:
            self.identity_mask = (False,) * D
        self.identity_mask = tuple(bool(b) for b in self.identity_mask)
        if len(self.identity_mask) != D:
            raise ShapeError("identity_mask length must equal the number of cores")
        for k, core in enumerate(self.cores):
            expected = (self.rank[k], self.shape.modes[k], self.rank[k + 1])
            if core.shape != expected:
                raise ShapeError(f"core {k} has extents {core.shape}, expected {expected}")
            if not np.all(np.isfinite(core)):
                raise NumericalError(f"core {k} contains non-finite values")
            if self.identity_mask[k] and not _is_identity(core):
                raise ShapeError(f"core {k} is masked as identity but is not a reshaped identity")

    @property
    def ndim(self) -> int:
        return self.shape.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.cores[0].dtype

    @property
    def trainable(self) -> list[int]:
        """Indices of cores that carry parameters."""
        return [k for k, fixed in enumerate(self.identity_mask) if not fixed]

    @property
    def is_reduced(self) -> bool:
        return any(self.identity_mask)

    def copy(self) -> "TensorTrain":
        return TensorTrain(self.shape, self.rank, [c.copy() for c in self.cores], self.identity_mask)

    def astype(self, dtype) -> "TensorTrain":
        return TensorTrain(self.shape, self.rank, [c.astype(dtype) for c in self.cores], self.identity_mask)


@dataclass
class DenseTensor:
    """Dense row-major tensor (grid modes followed by the payload axis)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("dense tensor contains non-finite values")

    @classmethod
    def from_flat(cls, extents: Sequence[int], flat: np.ndarray) -> "DenseTensor":
        flat = np.asarray(flat)
        if math.prod(extents) != flat.size:
            raise ShapeError(f"{flat.size} values cannot fill extents {tuple(extents)}")
        return cls(flat.reshape(tuple(extents)))

    @property
    def extents(self) -> tuple[int, ...]:
        return self.data.shape


def init_scale(rank: TtRank, sigma: float) -> float:
    """Per-core normal scale ``exp((2 log sigma - sum_k log R_k) / 2D)`` over ``R_1..R_D``.

    ``R_D`` is the payload, so a single payload element has std ``sigma / sqrt(payload)``.
    """
    D = len(rank) - 1
    log_sum = sum(math.log(r) for r in rank.ranks[1:])
    return math.exp((2.0 * math.log(sigma) - log_sum) / (2.0 * D))


def init_random(shape: TtShape, rank: TtRank, sigma: float, seed: int, dtype=np.float64) -> TensorTrain:
    """Draw every core element i.i.d. from ``Normal(0, init_scale(rank, sigma)^2)``."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    validate_rank(shape, rank)
    scale = init_scale(rank, sigma)
    rng = np.random.default_rng(seed)
    cores = [
        rng.normal(0.0, scale, size=(rank[k], shape.modes[k], rank[k + 1])).astype(dtype, copy=False)
        for k in range(shape.ndim)
    ]
    log.debug("init_random modes=%s rank=%s sigma_hat=%.6g", shape.modes, rank.ranks, scale)
    return TensorTrain(shape, rank, cores)


def zeros(shape: TtShape, rank: TtRank, dtype=np.float64) -> TensorTrain:
    validate_rank(shape, rank)
    cores = [np.zeros((rank[k], shape.modes[k], rank[k + 1]), dtype=dtype) for k in range(shape.ndim)]
    return TensorTrain(shape, rank, cores)


def element(tt: TensorTrain, index: Sequence[int]) -> np.ndarray:
    """Chain product of core slices at ``index``; returns the payload vector."""
    idx = [int(i) for i in index]
    if len(idx) != tt.ndim:
        raise ShapeError(f"index has {len(idx)} entries, expected {tt.ndim}")
    for k, (i, m) in enumerate(zip(idx, tt.shape.modes)):
        if not 0 <= i < m:
            raise ShapeError(f"index {i} out of range [0, {m}) at dimension {k}")
    v = tt.cores[0][0, idx[0], :]
    for k in range(1, tt.ndim):
        v = v @ tt.cores[k][:, idx[k], :]
    return np.array(v)


def contract(tt: TensorTrain) -> DenseTensor:
    """Contract the whole train into a dense tensor of extents ``modes + (payload,)``."""
    check_budget("contract", tt.shape.numel * tt.shape.payload)
    res = tt.cores[0].reshape(tt.shape.modes[0], tt.rank[1])
    for core in tt.cores[1:]:
        r_l, _, r_r = core.shape
        res = (res @ core.reshape(r_l, -1)).reshape(-1, r_r)
    return DenseTensor(res.reshape(tt.shape.extents))


def contract_backward(tt: TensorTrain, upstream: np.ndarray) -> dict[int, np.ndarray]:
    """Gradient of ``sum(upstream * contract(tt))`` with respect to every trainable core."""
    upstream = np.asarray(upstream)
    if upstream.shape != tt.shape.extents:
        raise ShapeError(f"upstream extents {upstream.shape} != {tt.shape.extents}")
    check_budget("contract_backward", 2 * tt.shape.numel * tt.shape.payload)
    D = tt.ndim
    modes = tt.shape.modes
    payload = tt.shape.payload

    # lefts[k]: product of cores [0, k) as (prod M[:k], R_k)
    lefts = [np.ones((1, 1), dtype=tt.dtype)]
    for k in range(D - 1):
        core = tt.cores[k]
        lefts.append((lefts[k] @ core.reshape(core.shape[0], -1)).reshape(-1, core.shape[2]))

    # rights[k]: product of cores (k, D) as (R_{k+1}, prod M[k+1:] * payload)
    rights: list[Optional[np.ndarray]] = [None] * D
    rights[D - 1] = np.eye(payload, dtype=tt.dtype)
    for k in range(D - 1, 0, -1):
        core = tt.cores[k]
        rights[k - 1] = (core.reshape(-1, core.shape[2]) @ rights[k]).reshape(core.shape[0], -1)

    grads = {}
    for k in tt.trainable:
        r_l, m, r_r = tt.cores[k].shape
        g = upstream.reshape(math.prod(modes[:k]), -1)
        t = (lefts[k].T @ g).reshape(r_l * m, -1)
        grads[k] = (t @ rights[k].T).reshape(r_l, m, r_r)
    return grads


def tt_svd(dense: DenseTensor, shape: TtShape, rank_cap: TtRank) -> TensorTrain:
    """Left-to-right TT-SVD sweep truncated to at most ``rank_cap[k]`` singular values.

    Caps above the maximal pyramid are lowered to it. With repeated singular
    values the first columns returned by the SVD routine are kept.
    """
    data = np.asarray(dense.data)
    if data.size != shape.numel * shape.payload:
        raise ShapeError(f"dense extents {data.shape} do not reshape to {shape.extents}")
    if len(rank_cap) != shape.ndim + 1:
        raise ShapeError(f"rank cap {rank_cap.ranks} has wrong length for {shape.ndim} modes")
    if not np.all(np.isfinite(data)):
        raise NumericalError("tt_svd input contains non-finite values")

    modes = shape.modes
    caps = [min(c, p) for c, p in zip(rank_cap.ranks, max_rank_pyramid(shape).ranks)]
    caps[0], caps[-1] = 1, shape.payload
    for k in range(shape.ndim - 1, 0, -1):
        caps[k] = min(caps[k], modes[k] * caps[k + 1])
    cores = []
    r_prev = 1
    rest = data.reshape(modes[0], -1)
    for k in range(shape.ndim - 1):
        mat = rest.reshape(r_prev * modes[k], -1)
        try:
            u, s, vt = np.linalg.svd(mat, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD did not converge at core {k}") from exc
        r = max(1, min(caps[k + 1], s.size))
        cores.append(np.ascontiguousarray(u[:, :r]).reshape(r_prev, modes[k], r))
        rest = s[:r, None] * vt[:r]
        r_prev = r
    cores.append(np.ascontiguousarray(rest).reshape(r_prev, modes[-1], shape.payload))
    rank = TtRank((1,) + tuple(c.shape[2] for c in cores))
    return TensorTrain(shape, rank, cores)


def reduced_window(shape: TtShape, rank: TtRank) -> tuple[int, int]:
    """Cores ``p..q`` (0-based, inclusive) that carry parameters in reduced form.

    Cores before ``p`` have square left matricizations, cores after ``q``
    square right matricizations. When both chains meet (a tie at the peak of
    an unclamped pyramid) the window collapses to the single core ``p``.
    """
    R = rank.ranks
    modes = shape.modes
    D = shape.ndim
    p = 0
    while p < D - 1 and R[p] * modes[p] == R[p + 1]:
        p += 1
    q = D - 1
    while q > 0 and R[q] == modes[q] * R[q + 1]:
        q -= 1
    return p, max(p, q)


def check_clamped_pyramid(shape: TtShape, rank: TtRank) -> int:
    """Return ``r`` such that ``rank == clamp_ranks(pyramid, r)`` or raise ``RankPatternError``."""
    pyramid = max_rank_pyramid(shape)
    if shape.ndim == 1:
        if rank != pyramid:
            raise RankPatternError(f"rank {rank.ranks} is not {pyramid.ranks}")
        return pyramid.r_max
    r = max(rank.ranks[1:-1])
    if clamp_ranks(pyramid, r) != rank:
        raise RankPatternError(f"rank {rank.ranks} is not a clamped pyramid of {pyramid.ranks}")
    return r


def full_to_reduced(tt: TensorTrain) -> TensorTrain:
    """Absorb square outer cores into their neighbours and fix them to identities."""
    check_clamped_pyramid(tt.shape, tt.rank)
    p, q = reduced_window(tt.shape, tt.rank)
    mask = tuple(k < p or k > q for k in range(tt.ndim))
    if tt.identity_mask == mask:
        return tt.copy()

    cores = [c.copy() for c in tt.cores]
    for k in range(p):
        r_l, m, r_r = cores[k].shape
        nxt = cores[k + 1]
        cores[k + 1] = (cores[k].reshape(r_l * m, r_r) @ nxt.reshape(r_r, -1)).reshape(nxt.shape)
        cores[k] = identity_core(r_l, m, r_r, "left", tt.dtype)
    for k in range(tt.ndim - 1, q, -1):
        r_l, m, r_r = cores[k].shape
        prv = cores[k - 1]
        cores[k - 1] = (prv.reshape(-1, r_l) @ cores[k].reshape(r_l, m * r_r)).reshape(prv.shape)
        cores[k] = identity_core(r_l, m, r_r, "right", tt.dtype)
    log.debug("full_to_reduced window p=%d q=%d", p, q)
    return TensorTrain(tt.shape, tt.rank, cores, mask)


def num_params(tt: TensorTrain) -> int:
    """Number of learned scalars (identity cores excluded)."""
    return sum(tt.cores[k].size for k in tt.trainable)


def rmse(a, b) -> float:
    """Root mean squared error between two equally shaped tensors."""
    a = a.data if isinstance(a, DenseTensor) else np.asarray(a)
    b = b.data if isinstance(b, DenseTensor) else np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"extents differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))
