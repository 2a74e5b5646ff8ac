"""Loss-spike detection, update skipping, batch retry and learning-rate backoff."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numcore import RngStream

NORMAL = "normal"
NARROW = "narrow_spike"
WIDE = "wide_spike"

PROCEED = "proceed"
SKIP_AND_RETRY = "skip_and_retry"
SKIP_RETRY_AND_BACKOFF = "skip_retry_and_backoff"


@dataclass
class SpikeDetector:
    """Robust rolling detector over recent non-spike losses.

    A loss is a spike when it exceeds ``median + narrow_k * MAD`` of the
    window. It is wide when it is the ``wide_run_len``-th consecutive spike,
    when it exceeds ``median + wide_k * MAD``, or when it is not finite.
    Spikes never enter the window.
    """

    window_size: int = 64
    narrow_k: float = 4.0
    wide_run_len: int = 3
    wide_k: float = 50.0
    min_history: int = 8
    min_spread: float = 1e-8
    window: deque = field(default_factory=deque)
    consecutive_spike_count: int = 0

    def center_spread(self) -> tuple[float, float]:
        w = np.fromiter(self.window, dtype=np.float64)
        med = float(np.median(w))
        mad = float(np.median(np.abs(w - med)))
        return med, mad

    def to_dict(self) -> dict:
        return {"window": list(self.window), "consecutive_spike_count": self.consecutive_spike_count}


def observe(detector: SpikeDetector, loss: float) -> str:
    """Classify ``loss`` and update ``detector`` in place."""
    if not math.isfinite(loss):
        detector.consecutive_spike_count += 1
        return WIDE
    if len(detector.window) < detector.min_history:
        detector.consecutive_spike_count = 0
        _push(detector, loss)
        return NORMAL
    med, mad = detector.center_spread()
    spread = max(mad, detector.min_spread)
    if loss > med + detector.narrow_k * spread:
        detector.consecutive_spike_count += 1
        if (detector.consecutive_spike_count >= detector.wide_run_len
                or loss > med + detector.wide_k * spread):
            return WIDE
        return NARROW
    detector.consecutive_spike_count = 0
    _push(detector, loss)
    return NORMAL


def _push(detector: SpikeDetector, loss: float) -> None:
    detector.window.append(loss)
    while len(detector.window) > detector.window_size:
        detector.window.popleft()


@dataclass(frozen=True)
class StepContext:
    step: int
    is_retry: bool = False


def on_spike(classification: str, batch, context: StepContext) -> str:
    """Action for a classified step.

    Narrow spikes proceed. A wide spike on a fresh batch skips the update and
    queues the batch for retry; a wide spike on a retried batch applies the
    update at a reduced learning rate.
    """
    if classification != WIDE:
        return PROCEED
    if context.is_retry:
        return SKIP_RETRY_AND_BACKOFF
    return SKIP_AND_RETRY


@dataclass
class RetryQueue:
    rng: RngStream
    horizon: int = 50
    pending: list = field(default_factory=list)  # (batch_id, original_step)
    enqueued: int = 0
    reinjected: int = 0

    def enqueue(self, batch_id, step: int) -> None:
        self.pending.append((batch_id, step))
        self.enqueued += 1


def reinject(queue: RetryQueue, schedule: list, rng: RngStream | None = None):
    """Insert every pending batch at a uniform offset within the next ``horizon`` steps.

    Returns ``(new_schedule, offsets)``; each entry of the new schedule is
    ``(batch_id, is_retry)``. Plain ids in ``schedule`` are treated as fresh.
    """
    rng = rng or queue.rng
    out = [s if isinstance(s, tuple) else (s, False) for s in schedule]
    if not queue.pending:
        return out, []
    span = min(queue.horizon, len(out) + 1)
    offsets = [int(rng.integers(0, span)) for _ in queue.pending]
    # insert back to front so earlier offsets keep their meaning
    order = sorted(range(len(offsets)), key=lambda j: (offsets[j], j), reverse=True)
    for j in order:
        out.insert(offsets[j], (queue.pending[j][0], True))
    queue.reinjected += len(queue.pending)
    queue.pending = []
    return out, offsets
