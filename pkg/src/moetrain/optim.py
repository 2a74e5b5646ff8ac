"""AdamW, global-norm clipping and the learning-rate / batch-size schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AnomalySignal, RejectedInputError
from .numcore import global_norm

BETA1 = 0.9
BETA2 = 0.95
EPS = 1e-8
WEIGHT_DECAY = 0.1
MAX_LR = 2.4e-4
WARMUP_STEPS = 2000
HALVE_FRACTION = 0.6
ANNEAL_START = 1.2e-4
ANNEAL_END = 1.2e-8
CLIP_NORM = 1.0
BATCH_INITIAL = 2560
BATCH_MAX = 8960


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    weight_decay: float = WEIGHT_DECAY

    @classmethod
    def zeros_like(cls, params: dict, **hyper) -> "AdamWState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)

    def copy(self) -> "AdamWState":
        return AdamWState({k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()},
                          self.step, self.beta1, self.beta2, self.eps, self.weight_decay)

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay}


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float):
    """One decoupled-weight-decay Adam update; inputs are not modified.

    Raises :class:`AnomalySignal` on non-finite gradients so the caller can
    route the event to the spike guard.
    """
    if lr < 0:
        raise RejectedInputError("learning rate must be >= 0")
    for k, g in grads.items():
        if k in params and not np.all(np.isfinite(g)):
            raise AnomalySignal(f"non-finite gradient for {k}", layer=k)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_p[k] = p * (1.0 - lr * state.weight_decay) - lr * upd
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamWState(new_m, new_v, step, b1, b2, state.eps, state.weight_decay)


def clip_global_norm(grads: dict, max_norm: float = CLIP_NORM):
    """Returns ``(clipped, pre_clip_norm)``."""
    norm = global_norm(grads.values())
    if not math.isfinite(norm):
        raise AnomalySignal("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "wsd"  # "wsd" | "inv_sqrt" | "constant"
    max_lr: float = MAX_LR
    warmup_steps: int = WARMUP_STEPS
    halve_fraction: float = HALVE_FRACTION
    start_lr: float = ANNEAL_START
    end_lr: float = ANNEAL_END

    def __post_init__(self):
        if self.kind not in ("wsd", "inv_sqrt", "constant"):
            raise RejectedInputError(f"unknown schedule kind {self.kind!r}")

    def lr(self, step: int, total_steps: int) -> float:
        if self.kind == "wsd":
            return wsd_lr(step, total_steps, self)
        if self.kind == "inv_sqrt":
            return inv_sqrt_lr(step, total_steps, self.start_lr, self.end_lr)
        return self.max_lr

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def wsd_lr(step: int, total_steps: int, schedule: LrSchedule = LrSchedule()) -> float:
    """Linear warmup, constant plateau, halved past ``halve_fraction`` of training."""
    if step < 0:
        raise RejectedInputError("step must be >= 0")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    if step >= schedule.halve_fraction * total_steps:
        return schedule.max_lr / 2.0
    return schedule.max_lr


def inv_sqrt_lr(step: int, anneal_steps: int, start: float = ANNEAL_START,
                end: float = ANNEAL_END) -> float:
    """``start / sqrt(1 + c*step)`` with ``c`` pinned so step ``anneal_steps`` gives ``end``."""
    if anneal_steps < 1:
        raise RejectedInputError("anneal_steps must be >= 1")
    c = ((start / end) ** 2 - 1.0) / anneal_steps
    return start / math.sqrt(1.0 + c * step)


@dataclass(frozen=True)
class BatchSizeSchedule:
    """Geometric staircase: the batch doubles at each boundary, capped at ``maximum``."""

    initial: int = BATCH_INITIAL
    maximum: int = BATCH_MAX
    boundaries: tuple[int, ...] = field(default=(1000, 2000))

    def __post_init__(self):
        if self.initial < 1 or self.maximum < self.initial:
            raise RejectedInputError("need 1 <= initial <= maximum")
        if list(self.boundaries) != sorted(self.boundaries):
            raise RejectedInputError("boundaries must be sorted")

    @property
    def ramp_end(self) -> int:
        return self.boundaries[-1] if self.boundaries else 0

    def to_dict(self) -> dict:
        return {"initial": self.initial, "maximum": self.maximum, "boundaries": list(self.boundaries)}


def batch_size_at(step: int, schedule: BatchSizeSchedule = BatchSizeSchedule()) -> int:
    if step < 0:
        raise RejectedInputError("step must be >= 0")
    passed = sum(1 for b in schedule.boundaries if step >= b)
    if schedule.boundaries and passed == len(schedule.boundaries):
        return schedule.maximum
    return min(schedule.initial * 2 ** passed, schedule.maximum)
