"""Analytic space/time cost model of the sampling schemes, with optional measurement.

FLOPs count two per multiply-add. Memory counts scalars, not bytes. When
``training`` is on, activations kept for the backward pass are included.
"""

import csv
import logging
import math
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from ttnf_tool.core.sampling import SamplerKind, backward, sample_with_trace, uniform_batch
from ttnf_tool.core.tt import (
    TtRank,
    TtShape,
    clamp_ranks,
    full_to_reduced,
    get_mem_budget,
    init_random,
    max_rank_pyramid,
    reduced_window,
    set_mem_budget,
    validate_rank,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "kind",
    "D",
    "log2_numel",
    "payload",
    "r",
    "B",
    "params",
    "flops",
    "peak_mem_elems",
    "seconds",
    "measured_peak_elems",
]


@dataclass
class CostReport:
    kind: SamplerKind
    shape: TtShape
    rank: TtRank
    batch: int
    params: int
    flops: int
    peak_mem_elems: int
    seconds: Optional[float] = None
    measured_peak_elems: Optional[int] = None

    @property
    def r(self) -> int:
        interior = self.rank.ranks[1:-1]
        return max(interior) if interior else self.rank.r_max

    def csv_row(self, timing: bool = True) -> dict:
        seconds = self.seconds if timing else (0.0 if self.seconds is not None else None)
        return {
            "kind": self.kind.value,
            "D": self.shape.ndim,
            "log2_numel": f"{math.log2(self.shape.numel):g}",
            "payload": self.shape.payload,
            "r": self.r,
            "B": self.batch,
            "params": self.params,
            "flops": self.flops,
            "peak_mem_elems": self.peak_mem_elems,
            "seconds": "" if seconds is None else f"{seconds:.6f}",
            "measured_peak_elems": "" if self.measured_peak_elems is None else self.measured_peak_elems,
        }


def _core_pairs(R: Sequence[int], first: int, last: int) -> int:
    """Sum of ``R_k * R_{k+1}`` over cores ``first..last``."""
    return sum(R[k] * R[k + 1] for k in range(first, last + 1))


def estimate_cost(
    kind: SamplerKind, shape: TtShape, rank: TtRank, batch: int, training: bool = True
) -> CostReport:
    """Analytic parameter count, forward FLOPs and peak activation memory."""
    kind = SamplerKind(kind)
    validate_rank(shape, rank)
    R = rank.ranks
    D = shape.ndim
    B = int(batch)
    full_params = sum(R[k] * shape.modes[k] * R[k + 1] for k in range(D))
    pairs = _core_pairs(R, 0, D - 1)

    if kind is SamplerKind.V1:
        flops = 2 * B * pairs
        if training:
            # every replicated slice and partial product stays alive for backward
            peak = B * pairs + B * sum(R[1:]) + B * max(R[1:])
        else:
            peak = B * max(R[k] * R[k + 1] for k in range(D)) + B * max(R[1:])
        params = full_params
    elif kind is SamplerKind.V2:
        flops = 2 * B * pairs
        peak = 2 * B * (sum(R[1:]) if training else max(R[1:])) + 2 * B
        params = full_params
    elif kind is SamplerKind.V3:
        p, q = reduced_window(shape, rank)
        flops = 2 * B * _core_pairs(R, p + 1, q)
        window = R[p + 1 : q + 2]
        peak = 2 * B * (sum(window) if training else max(window)) + 2 * B
        params = sum(R[k] * shape.modes[k] * R[k + 1] for k in range(p, q + 1))
    else:
        # forward: chained contraction, then a gather of B payloads
        flops = 0
        step_peak = 0
        lefts = 0
        left = 1
        for k in range(D):
            out = left * shape.modes[k] * R[k + 1]
            if k > 0:
                flops += 2 * left * R[k] * shape.modes[k] * R[k + 1]
            step_peak = max(step_peak, left * R[k] + out)
            lefts += left * R[k]
            left *= shape.modes[k]
        params = full_params
        if training:
            # upstream tensor, left and right partial products, core gradients
            rights = sum(R[k + 1] * math.prod(shape.modes[k + 1 :]) * shape.payload for k in range(D))
            peak = shape.numel * shape.payload + lefts + rights + params + B * shape.payload
        else:
            peak = step_peak + B * shape.payload
    return CostReport(kind, shape, rank, B, params, flops, peak)


def measure_cost(
    kind: SamplerKind, shape: TtShape, rank: TtRank, batch: int, seed: int = 0, training: bool = True
) -> CostReport:
    """Analytic report plus wall-clock seconds and the observed peak allocation."""
    report = estimate_cost(kind, shape, rank, batch, training)
    tt = init_random(shape, rank, 1.0, seed)
    if kind is SamplerKind.V3:
        tt = full_to_reduced(tt)
    indices = uniform_batch(shape, batch, np.random.default_rng(seed))
    upstream = np.ones((batch, shape.payload))

    tracemalloc.start()
    start = time.perf_counter()
    try:
        _, trace = sample_with_trace(tt, indices, kind, record=training)
        if training:
            backward(tt, indices, kind, upstream, trace)
        report.seconds = time.perf_counter() - start
        _, peak_bytes = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    report.measured_peak_elems = peak_bytes // tt.dtype.itemsize
    return report


def rank_sweep(shape: TtShape) -> list[int]:
    """Powers of two up to the pyramid peak, plus the peak itself."""
    peak = max_rank_pyramid(shape).r_max
    rs = [1 << i for i in range(peak.bit_length()) if (1 << i) < peak]
    return rs + [peak]


def _cost_cell(args: tuple) -> CostReport:
    kind, shape, rank, batch, training, measure, measure_max_numel, seed, budget = args
    set_mem_budget(budget)
    report = estimate_cost(kind, shape, rank, batch, training)
    fits = report.peak_mem_elems <= get_mem_budget() and shape.numel <= measure_max_numel
    if measure and fits:
        report = measure_cost(kind, shape, rank, batch, seed, training)
    return report


def sweep_costs(
    shapes: Iterable[TtShape],
    kinds: Iterable[SamplerKind],
    batches: Iterable[int],
    ranks: Optional[Iterable[int]] = None,
    training: bool = True,
    measure: bool = False,
    measure_max_numel: int = 2**20,
    seed: int = 0,
    jobs: int = 1,
) -> list[CostReport]:
    """Reports in shape x r x kind x batch order, whatever ``jobs`` is.

    Cells are measured only when ``measure`` is set, the field is at most
    ``measure_max_numel`` cells and the analytic peak fits the memory budget.
    """
    kinds = [SamplerKind(k) for k in kinds]
    batches = list(batches)
    budget = get_mem_budget()
    cells = []
    for shape in shapes:
        pyramid = max_rank_pyramid(shape)
        rs = list(ranks) if ranks is not None else rank_sweep(shape)
        for r in rs:
            rank = clamp_ranks(pyramid, r)
            for kind in kinds:
                for B in batches:
                    cells.append((kind, shape, rank, B, training, measure, measure_max_numel, seed, budget))
    if jobs <= 1:
        reports = [_cost_cell(cell) for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_cost_cell, cells))
    log.debug("cost sweep produced %d cells", len(reports))
    return reports


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)[0])


def write_cost_csv(path: Path, reports: Iterable[CostReport], timing: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.csv_row(timing))
    return path
