"""Losses, Adam and the warmup / exponential-decay learning-rate schedule."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, MutableMapping, Optional, Union

import numpy as np

from ttnf_tool.core.tt import TensorTrain
from ttnf_tool.errors import ShapeError

log = logging.getLogger(__name__)

LrScale = Union[float, np.ndarray]


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    lr_max: float
    lr_min: float
    warmup_frac: float = 0.05
    warmup_start: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}")
        if self.lr_max < 0 or self.lr_min < 0:
            raise ValueError("learning rates must be non-negative")
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")

    @property
    def warmup_steps(self) -> int:
        return min(math.ceil(self.warmup_frac * self.total_steps), self.total_steps - 1)


def lr_at(sched: LrSchedule, step: int) -> float:
    """Learning rate used at ``step`` (0-based).

    Linear ramp from ``warmup_start`` to ``lr_max`` over the warmup steps, then
    geometric decay that lands exactly on ``lr_min`` at the last step.
    """
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    w = sched.warmup_steps
    if step < w:
        return sched.warmup_start + (sched.lr_max - sched.warmup_start) * step / w
    if sched.lr_max == 0.0:
        return 0.0
    span = sched.total_steps - 1 - w
    if span <= 0:
        return sched.lr_min if step == sched.total_steps - 1 else sched.lr_max
    t = (step - w) / span
    if step == sched.total_steps - 1:
        return sched.lr_min
    return sched.lr_max * (sched.lr_min / sched.lr_max) ** t


class LossKind(str, Enum):
    L1 = "l1"
    L2 = "l2"


def loss_and_grad(kind: LossKind, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over all ``B x C`` entries and its gradient with respect to ``pred``."""
    kind = LossKind(kind)
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    n = pred.size
    diff = pred - target
    if kind is LossKind.L2:
        return float(np.mean(diff**2)), 2.0 * diff / n
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def moments_for(self, key, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if key not in self.m:
            self.m[key] = np.zeros_like(like)
            self.v[key] = np.zeros_like(like)
        elif self.m[key].shape != like.shape:
            raise ShapeError(f"moment extents {self.m[key].shape} != parameter extents {like.shape} for {key!r}")
        return self.m[key], self.v[key]


def adam_step(
    state: AdamState,
    params: MutableMapping,
    grads: Mapping,
    lr: float,
    lr_scale: Optional[Mapping] = None,
    frozen: frozenset = frozenset(),
) -> None:
    """One bias-corrected Adam update applied in place to ``params``.

    ``lr_scale`` optionally maps a parameter key to a scalar or broadcastable
    array multiplying ``lr`` for that parameter. Keys in ``frozen`` are skipped.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, g in grads.items():
        if key in frozen:
            continue
        p = params[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient extents {g.shape} != parameter extents {p.shape} for {key!r}")
        m, v = state.moments_for(key, p)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step_lr = lr if lr_scale is None or key not in lr_scale else lr * lr_scale[key]
        update = step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)


def adam_step_tt(
    state: AdamState, tt: TensorTrain, grads: Mapping[int, np.ndarray], lr: float, lr_scale: Optional[Mapping] = None
) -> None:
    """``adam_step`` over the cores of ``tt``; identity-masked cores never move."""
    params = dict(enumerate(tt.cores))
    frozen = frozenset(k for k, fixed in enumerate(tt.identity_mask) if fixed)
    adam_step(state, params, grads, lr, lr_scale, frozen)
