"""Batched sampling from a TensorTrain and reverse-mode gradients into its cores.

Three schemes are provided:

* ``v1`` replicates the indexed core slices per sample and chains batched
  matrix products (memory grows with ``B * D * R_max^2``).
* ``v2`` groups samples by mode index with a stable permutation and multiplies
  each group by a single core slice (BIMVP), keeping activations at
  ``B * R`` per step.
* ``v3`` works on the reduced parameterization: identity cores are replaced by
  integer index propagation and only cores ``p..q`` are multiplied.

``backward`` returns gradients of ``sum(upstream * values)``. Contributions of
samples sharing a core slice are summed in the order of the stable sort by
mode index, so repeated runs are bit-identical.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

import numpy as np

from ttnf_tool.core.tt import (
    DenseTensor,
    TensorTrain,
    TtShape,
    check_budget,
    contract,
    contract_backward,
    reduced_window,
)
from ttnf_tool.errors import ShapeError

log = logging.getLogger(__name__)


class SamplerKind(str, Enum):
    V1 = "v1"
    V2 = "v2"
    V3 = "v3"
    DENSE_GATHER = "dense"


@dataclass(frozen=True)
class IndexBatch:
    """``B x D`` multi-indices into the virtual full tensor."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[0] < 1:
            raise ShapeError(f"index batch must be a non-empty B x D array, got shape {idx.shape}")
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    def validate(self, shape: TtShape) -> None:
        if self.indices.shape[1] != shape.ndim:
            raise ShapeError(f"indices have {self.indices.shape[1]} columns, expected {shape.ndim}")
        modes = np.asarray(shape.modes)
        if np.any(self.indices < 0) or np.any(self.indices >= modes):
            raise ShapeError("index out of range")


BatchLike = Union[IndexBatch, np.ndarray]


@dataclass(frozen=True)
class Permutation:
    """A bijection on ``0..B-1`` together with its inverse."""

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        ar = np.arange(n)
        return cls(ar, ar.copy())

    @classmethod
    def from_forward(cls, forward: np.ndarray) -> "Permutation":
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(forward.size)
        return cls(forward, inverse)


@dataclass
class _BimvpStep:
    core: int
    sorted_inputs: np.ndarray
    perm: Permutation
    counts: np.ndarray


@dataclass
class SamplingTrace:
    """Activations cached by a forward pass for the matching ``backward``."""

    kind: SamplerKind
    steps: list[_BimvpStep] = field(default_factory=list)
    order: Optional[np.ndarray] = None
    first_keys: Optional[np.ndarray] = None
    window: tuple[int, int] = (0, 0)
    right_offsets: Optional[np.ndarray] = None
    slices: list[np.ndarray] = field(default_factory=list)
    partials: list[np.ndarray] = field(default_factory=list)


def _as_batch(batch: BatchLike, shape: TtShape) -> IndexBatch:
    if not isinstance(batch, IndexBatch):
        batch = IndexBatch(batch)
    batch.validate(shape)
    return batch


def _group_sum(keys: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum ``rows`` sharing a key, visiting rows in stable-sorted key order."""
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_keys[1:] != sorted_keys[:-1])))
    return sorted_keys[starts], np.add.reduceat(rows[order], starts, axis=0)


def bimvp(core: np.ndarray, i: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, Permutation]:
    """Batched-indexed matrix-vector permuted product.

    Output row ``j`` equals ``v[perm[j]] @ core[:, i[perm[j]], :]`` where
    ``perm`` stably sorts ``i``; rows are grouped by mode index.
    """
    out, perm, _ = _bimvp(core, np.asarray(i, dtype=np.int64), np.asarray(v))
    return out, perm


def _bimvp(core: np.ndarray, i: np.ndarray, v: np.ndarray):
    r_l, m, r_r = core.shape
    if i.shape[0] != v.shape[0] or v.shape[1] != r_l:
        raise ShapeError(f"bimvp shapes disagree: core {core.shape}, i {i.shape}, v {v.shape}")
    if np.any(i < 0) or np.any(i >= m):
        raise ShapeError("bimvp mode index out of range")
    forward = np.argsort(i, kind="stable")
    counts = np.bincount(i, minlength=m)
    sorted_inputs = v[forward]
    out = np.empty((i.shape[0], r_r), dtype=np.result_type(core, v))
    start = 0
    for mode in np.flatnonzero(counts):
        stop = start + counts[mode]
        out[start:stop] = sorted_inputs[start:stop] @ core[:, mode, :]
        start = stop
    return out, Permutation.from_forward(forward), (sorted_inputs, counts)


def _chain_forward(tt: TensorTrain, idx: np.ndarray, first: int, last: int, v: np.ndarray, trace):
    """Run BIMVP over cores ``first+1..last``; returns rows in original order."""
    order = np.arange(idx.shape[0])
    for k in range(first + 1, last + 1):
        v, perm, (sorted_inputs, counts) = _bimvp(tt.cores[k], idx[order, k], v)
        order = order[perm.forward]
        if trace is not None:
            trace.steps.append(_BimvpStep(k, sorted_inputs, perm, counts))
    if trace is not None:
        trace.order = order
    restored = np.empty_like(v)
    restored[order] = v
    return restored


def _chain_backward(tt: TensorTrain, trace: SamplingTrace, g: np.ndarray, grads: dict) -> np.ndarray:
    """Propagate ``g`` (original row order) back through the cached BIMVP steps."""
    g = g[trace.order]
    for step in reversed(trace.steps):
        core = tt.cores[step.core]
        g_in = np.empty((g.shape[0], core.shape[0]), dtype=g.dtype)
        grad = grads.get(step.core)
        start = 0
        for mode in np.flatnonzero(step.counts):
            stop = start + step.counts[mode]
            if grad is not None:
                grad[:, mode, :] += step.sorted_inputs[start:stop].T @ g[start:stop]
            g_in[start:stop] = g[start:stop] @ core[:, mode, :].T
            start = stop
        g = np.empty_like(g_in)
        g[step.perm.forward] = g_in
    return g


def sample_v1(tt: TensorTrain, batch: BatchLike, trace: Optional[SamplingTrace] = None) -> np.ndarray:
    """Replicate indexed slices per sample and chain batched matrix products.

    With a ``trace`` every slice and partial product is kept for ``backward``;
    without one a slice is released once it has been multiplied in.
    """
    idx = _as_batch(batch, tt.shape).indices
    B = idx.shape[0]
    per_core = [c.shape[0] * c.shape[2] for c in tt.cores]
    check_budget("sample_v1", B * (sum(per_core) if trace is not None else max(per_core)))
    v = None
    for k, core in enumerate(tt.cores):
        block = np.ascontiguousarray(core[:, idx[:, k], :].transpose(1, 0, 2))
        v = block[:, 0, :] if k == 0 else np.matmul(v[:, None, :], block)[:, 0, :]
        if trace is not None:
            trace.slices.append(block)
            trace.partials.append(v)
    return v


def sample_v2(tt: TensorTrain, batch: BatchLike, trace: Optional[SamplingTrace] = None) -> np.ndarray:
    """Memory-efficient sampling: BIMVP chain with permutation bookkeeping."""
    idx = _as_batch(batch, tt.shape).indices
    v = tt.cores[0][0, idx[:, 0], :]
    if trace is not None:
        trace.first_keys = idx[:, 0]
    return _chain_forward(tt, idx, 0, tt.ndim - 1, v, trace)


def _check_reduced(tt: TensorTrain) -> tuple[int, int]:
    p, q = reduced_window(tt.shape, tt.rank)
    expected = tuple(k < p or k > q for k in range(tt.ndim))
    if tt.identity_mask != expected:
        raise ShapeError("v3 sampling needs the reduced parameterization (see full_to_reduced)")
    return p, q


def sample_v3(tt: TensorTrain, batch: BatchLike, trace: Optional[SamplingTrace] = None) -> np.ndarray:
    """Reduced-parameterization sampling: index propagation outside cores ``p..q``."""
    idx = _as_batch(batch, tt.shape).indices
    p, q = _check_reduced(tt)
    modes = tt.shape.modes
    payload = tt.shape.payload
    B = idx.shape[0]

    i_left = np.zeros(B, dtype=np.int64)
    for k in range(p):
        i_left = i_left * modes[k] + idx[:, k]
    i_right = np.zeros(B, dtype=np.int64)
    for k in range(q + 1, tt.ndim):
        i_right = i_right + idx[:, k] * tt.rank[k + 1]

    core_p = tt.cores[p]
    rows = i_left * modes[p] + idx[:, p]
    cols = i_right[:, None] + np.arange(payload)
    if trace is not None:
        trace.window = (p, q)
        trace.first_keys = rows
        trace.right_offsets = i_right
    if p == q:
        return core_p.reshape(-1, core_p.shape[2])[rows[:, None], cols]
    v = core_p.reshape(-1, core_p.shape[2])[rows]
    v = _chain_forward(tt, idx, p, q, v, trace)
    return v[np.arange(B)[:, None], cols]


def gather_dense(dense: DenseTensor, batch: BatchLike) -> np.ndarray:
    """Rows ``dense[indices[b], :]``; the last axis of ``dense`` is the payload."""
    data = dense.data
    idx = batch.indices if isinstance(batch, IndexBatch) else IndexBatch(batch).indices
    if idx.shape[1] != data.ndim - 1:
        raise ShapeError(f"dense extents {data.shape} do not match {idx.shape[1]}-dimensional indices")
    if np.any(idx < 0) or np.any(idx >= np.asarray(data.shape[:-1])):
        raise ShapeError("index out of range")
    return data[tuple(idx.T)]


def sample_with_trace(
    tt: TensorTrain, batch: BatchLike, kind: SamplerKind, record: bool = True
) -> tuple[np.ndarray, Optional[SamplingTrace]]:
    """Forward pass of any scheme, optionally caching activations for ``backward``."""
    kind = SamplerKind(kind)
    trace = SamplingTrace(kind) if record else None
    if kind is SamplerKind.V1:
        values = sample_v1(tt, batch, trace)
    elif kind is SamplerKind.V2:
        values = sample_v2(tt, batch, trace)
    elif kind is SamplerKind.V3:
        values = sample_v3(tt, batch, trace)
    else:
        values = gather_dense(contract(tt), _as_batch(batch, tt.shape))
    return values, trace


def sample(tt: TensorTrain, batch: BatchLike, kind: SamplerKind = SamplerKind.V2) -> np.ndarray:
    return sample_with_trace(tt, batch, kind, record=False)[0]


def backward(
    tt: TensorTrain,
    batch: BatchLike,
    kind: SamplerKind,
    upstream: np.ndarray,
    trace: Optional[SamplingTrace] = None,
) -> dict[int, np.ndarray]:
    """Gradients of ``sum(upstream * sample(tt, batch, kind))`` for every trainable core.

    Without a ``trace`` the forward pass is recomputed first.
    """
    kind = SamplerKind(kind)
    batch = _as_batch(batch, tt.shape)
    idx = batch.indices
    upstream = np.asarray(upstream)
    if upstream.shape != (batch.count, tt.shape.payload):
        raise ShapeError(f"upstream shape {upstream.shape} != {(batch.count, tt.shape.payload)}")
    if trace is None:
        _, trace = sample_with_trace(tt, batch, kind, record=True)
    elif trace.kind is not kind:
        raise ShapeError(f"trace was recorded for {trace.kind.value}, not {kind.value}")

    if kind is SamplerKind.DENSE_GATHER:
        flat = np.ravel_multi_index(tuple(idx.T), tt.shape.modes)
        keys, sums = _group_sum(flat, upstream)
        full = np.zeros((tt.shape.numel, tt.shape.payload), dtype=np.result_type(tt.dtype, upstream))
        full[keys] = sums
        return contract_backward(tt, full.reshape(tt.shape.extents))

    dtype = np.result_type(tt.dtype, upstream)
    grads = {k: np.zeros(tt.cores[k].shape, dtype=dtype) for k in tt.trainable}

    if kind is SamplerKind.V1:
        g = upstream
        for k in range(tt.ndim - 1, 0, -1):
            outer = trace.partials[k - 1][:, :, None] * g[:, None, :]
            g = np.matmul(trace.slices[k], g[:, :, None])[:, :, 0]
            if k in grads:
                keys, sums = _group_sum(idx[:, k], outer)
                grads[k][:, keys, :] += sums.transpose(1, 0, 2)
        if 0 in grads:
            keys, sums = _group_sum(idx[:, 0], g)
            grads[0][0, keys, :] += sums
        return grads

    if kind is SamplerKind.V2:
        g = _chain_backward(tt, trace, upstream, grads)
        if 0 in grads:
            keys, sums = _group_sum(trace.first_keys, g)
            grads[0][0, keys, :] += sums
        return grads

    p, q = _check_reduced(tt)
    core_p = tt.cores[p]
    grad_p = grads[p].reshape(-1, core_p.shape[2])
    if p == q:
        flat = trace.first_keys * core_p.shape[2] + trace.right_offsets
        keys, sums = _group_sum(flat, upstream)
        np.add.at(grads[p].reshape(-1), keys[:, None] + np.arange(tt.shape.payload), sums)
        return grads
    g = np.zeros((batch.count, tt.rank[q + 1]), dtype=dtype)
    g[np.arange(batch.count)[:, None], trace.right_offsets[:, None] + np.arange(tt.shape.payload)] = upstream
    g = _chain_backward(tt, trace, g, grads)
    keys, sums = _group_sum(trace.first_keys, g)
    grad_p[keys] += sums
    return grads


def uniform_batch(shape: TtShape, count: int, rng: np.random.Generator) -> IndexBatch:
    """``count`` multi-indices drawn uniformly with replacement."""
    return IndexBatch(rng.integers(0, np.asarray(shape.modes), size=(count, shape.ndim)))


def epoch_batches(shape: TtShape, count: int, rng: np.random.Generator) -> Iterator[IndexBatch]:
    """Endless minibatches visiting every cell once per epoch in a fresh random order."""
    while True:
        order = rng.permutation(shape.numel)
        for start in range(0, shape.numel - count + 1, count):
            flat = order[start : start + count]
            yield IndexBatch(np.stack(np.unravel_index(flat, shape.modes), axis=1))
