"""Elastic local-update synchronization with a pseudo-gradient penalty.

Workers train locally from a shared anchor. At a sync point each worker's
pseudo-gradient ``anchor - local`` is computed, anomalous workers are
dropped by a per-worker EMA rule, the rest are averaged with inverse-norm
weights, the merged step is norm-clipped and applied to the anchor, and
every worker restarts from the new anchor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .errors import RejectedInputError
from .numcore import ema_update, global_norm


@dataclass(frozen=True)
class PenaltyConfig:
    enabled: bool = True
    ema_decay: float = 0.9
    anomaly_multiplier: float = 3.0
    clip_threshold: float = 1.0
    epsilon: float = 1e-8
    warmup_rounds: int = 5
    weighting: str = "inverse"  # "inverse" | "softmax"
    shared_ema: bool = False

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise RejectedInputError("ema_decay must lie in (0, 1)")
        if min(self.anomaly_multiplier, self.clip_threshold, self.epsilon) <= 0:
            raise RejectedInputError("penalty parameters must be positive")
        if self.weighting not in ("inverse", "softmax"):
            raise RejectedInputError(f"unknown weighting {self.weighting!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class SyncPolicy:
    kind: str = "every_H_steps"  # or "time_threshold"
    H: int = 4
    tau: float = 0.0

    def __post_init__(self):
        if self.kind == "every_H_steps":
            if self.H < 1:
                raise RejectedInputError("H must be >= 1")
        elif self.kind == "time_threshold":
            if self.tau <= 0:
                raise RejectedInputError("tau must be > 0")
        else:
            raise RejectedInputError(f"unknown sync policy {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "H": self.H, "tau": self.tau}


def should_sync(policy: SyncPolicy, local_steps: int, elapsed_sim_time: float = 0.0) -> bool:
    if policy.kind == "every_H_steps":
        return local_steps >= policy.H
    return elapsed_sim_time >= policy.tau


@dataclass
class EmaStat:
    mean: float = 0.0
    dev: float = 0.0
    count: int = 0


@dataclass
class WorkerReplica:
    worker_id: int
    params: dict
    opt_state: object = None
    router_state: object = None
    local_step_count: int = 0
    total_steps: int = 0
    loss_trace: list = field(default_factory=list)


@dataclass
class PseudoGradient:
    worker_id: int
    delta: dict
    norm: float


def compute_pseudo_gradient(anchor: dict, worker: WorkerReplica) -> PseudoGradient:
    if set(anchor) != set(worker.params):
        raise RejectedInputError("anchor and worker hold different parameter sets")
    delta = {}
    for k, a in anchor.items():
        w = worker.params[k]
        if a.shape != w.shape:
            raise RejectedInputError(f"shape mismatch for {k}: {a.shape} vs {w.shape}")
        delta[k] = a - w
    return PseudoGradient(worker.worker_id, delta, global_norm(delta.values()))


def local_round(worker: WorkerReplica, batches, steps: int, step_fn: Callable) -> WorkerReplica:
    """Run ``steps`` local updates; ``step_fn(worker, batch)`` mutates the worker."""
    if steps < 1:
        raise RejectedInputError("steps must be >= 1")
    it = iter(batches)
    for _ in range(steps):
        step_fn(worker, next(it))
        worker.local_step_count += 1
        worker.total_steps += 1
    return worker


def detect_anomalies(norms: dict[int, float], ema_states: dict[int, EmaStat],
                     config: PenaltyConfig) -> tuple[set[int], dict[int, EmaStat]]:
    """Exclude worker ``j`` iff ``norm_j > mean_j + m * dev_j``.

    A worker with fewer than ``warmup_rounds`` observations is never
    excluded. Only included workers fold their norm into their EMA. If every
    worker would be excluded, the lowest-norm worker (lowest id on ties) is kept.
    """
    if not norms:
        raise RejectedInputError("need at least one worker")
    ids = sorted(norms)
    new_states = {k: EmaStat(v.mean, v.dev, v.count) for k, v in ema_states.items()}
    if config.shared_ema:
        pooled = new_states.get(-1, EmaStat())
        stats = {j: pooled for j in ids}
    else:
        stats = {j: new_states.get(j, EmaStat()) for j in ids}

    excluded = set()
    for j in ids:
        st = stats[j]
        if st.count >= config.warmup_rounds and norms[j] > st.mean + config.anomaly_multiplier * st.dev:
            excluded.add(j)
    if len(excluded) == len(ids):
        keep = min(ids, key=lambda j: (norms[j], j))
        excluded.discard(keep)

    included = [j for j in ids if j not in excluded]
    if config.shared_ema:
        st = stats[ids[0]]
        for j in included:
            st = _fold(st, norms[j], config.ema_decay)
        new_states[-1] = st
    else:
        for j in included:
            new_states[j] = _fold(stats[j], norms[j], config.ema_decay)
    return excluded, new_states


def _fold(st: EmaStat, x: float, decay: float) -> EmaStat:
    if st.count == 0:
        return EmaStat(x, 0.0, 1)
    m, d = ema_update((st.mean, st.dev), x, decay)
    return EmaStat(m, d, st.count + 1)


def merge_weights(norms: list[float], config: PenaltyConfig) -> list[float]:
    if not norms:
        raise RejectedInputError("need at least one included worker")
    if config.weighting == "softmax":
        lo = min(norms)
        raw = [math.exp(-(n - lo)) for n in norms]
    else:
        raw = [1.0 / (n + config.epsilon) for n in norms]
    total = math.fsum(raw)
    return [r / total for r in raw]


def weighted_average(pseudo_grads: list[PseudoGradient], config: PenaltyConfig):
    """Returns ``(merged_delta, weights)``; inputs are summed in worker-id order."""
    pgs = sorted(pseudo_grads, key=lambda p: p.worker_id)
    w = merge_weights([p.norm for p in pgs], config)
    merged = {}
    for k in pgs[0].delta:
        acc = w[0] * pgs[0].delta[k]
        for wj, pg in zip(w[1:], pgs[1:]):
            acc = acc + wj * pg.delta[k]
        merged[k] = acc
    return merged, w


def clip_pseudo_gradient(delta: dict, threshold: float):
    """Global-norm clip. Returns ``(clipped, pre_norm, scale)``."""
    if threshold <= 0:
        raise RejectedInputError("threshold must be > 0")
    norm = global_norm(delta.values())
    if norm > threshold:
        scale = threshold / norm
        return {k: v * scale for k, v in delta.items()}, norm, scale
    return dict(delta), norm, 1.0


def outer_update(anchor: dict, delta: dict, outer_lr: float = 1.0) -> dict:
    if outer_lr <= 0:
        raise RejectedInputError("outer_lr must be > 0")
    return {k: a - outer_lr * delta[k] for k, a in anchor.items()}


@dataclass
class SyncResult:
    anchor: dict
    ema_states: dict
    momentum: dict | None
    record: dict


def sync_round(anchor: dict, workers: list[WorkerReplica], ema_states: dict, config: PenaltyConfig,
               outer_lr: float = 1.0, outer_momentum: float = 0.0, momentum: dict | None = None,
               round_index: int = 0, absent: set | frozenset = frozenset(),
               corrupt: dict | None = None) -> SyncResult:
    """One merge: detect, weight, clip, update, then broadcast.

    ``absent`` lists workers left out of the merge entirely; ``corrupt``
    maps worker id to a factor applied to that worker's pseudo-gradient
    (fault injection). Workers are reset to the new anchor in place.
    """
    corrupt = corrupt or {}
    pgs = []
    for w in sorted(workers, key=lambda w: w.worker_id):
        if w.worker_id in absent:
            continue
        pg = compute_pseudo_gradient(anchor, w)
        f = corrupt.get(w.worker_id)
        if f is not None:
            delta = {k: v * f for k, v in pg.delta.items()}
            pg = PseudoGradient(pg.worker_id, delta, global_norm(delta.values()))
        pgs.append(pg)
    if not pgs:
        raise RejectedInputError("no workers available for merge")
    norms = {p.worker_id: p.norm for p in pgs}

    if config.enabled:
        excluded, ema_states = detect_anomalies(norms, ema_states, config)
        included = [p for p in pgs if p.worker_id not in excluded]
        merged, weights = weighted_average(included, config)
        clipped, pre, scale = clip_pseudo_gradient(merged, config.clip_threshold)
    else:
        excluded = set()
        included = pgs
        n = len(included)
        weights = [1.0 / n] * n
        merged = {}
        for k in included[0].delta:
            acc = weights[0] * included[0].delta[k]
            for wj, pg in zip(weights[1:], included[1:]):
                acc = acc + wj * pg.delta[k]
            merged[k] = acc
        clipped, pre, scale = merged, global_norm(merged.values()), 1.0

    by_id = {w.worker_id: w for w in workers}
    if outer_momentum > 0:
        momentum = {k: outer_momentum * (momentum[k] if momentum else 0.0) + v for k, v in clipped.items()}
        new_anchor = outer_update(anchor, momentum, outer_lr)
    elif outer_lr == 1.0 and scale == 1.0 and not any(p.worker_id in corrupt for p in included):
        # exact weighted average of local params; avoids a - (a - b) rounding
        ids = [p.worker_id for p in included]
        new_anchor = {}
        for k in anchor:
            acc = weights[0] * by_id[ids[0]].params[k]
            for wj, j in zip(weights[1:], ids[1:]):
                acc = acc + wj * by_id[j].params[k]
            new_anchor[k] = acc
    else:
        new_anchor = outer_update(anchor, clipped, outer_lr)

    for w in workers:
        w.params = {k: v.copy() for k, v in new_anchor.items()}
        w.local_step_count = 0

    record = {
        "round": round_index,
        "included_workers": [p.worker_id for p in included],
        "excluded_workers": sorted(excluded),
        "absent_workers": sorted(absent),
        "norms": {str(k): v for k, v in sorted(norms.items())},
        "weights": {str(p.worker_id): wj for p, wj in zip(included, weights)},
        "merged_norm_pre_clip": pre,
        "merged_norm_post_clip": pre * scale,
    }
    return SyncResult(new_anchor, ema_states, momentum, record)


def layerwise_sync_plan(compute: list[float], comm: list[float]) -> dict:
    """Overlap layer ``l`` compute with the parameter fetch of layer ``l+1``.

    Duration is ``comm[0] + sum_l max(compute[l], comm[l+1]) + compute[-1]``.
    """
    if not compute or len(compute) != len(comm):
        raise RejectedInputError("need >= 1 layer with matching compute/comm lists")
    steps = [{"layer": 0, "fetch": 0, "start": 0.0, "end": float(comm[0]), "phase": "fetch"}]
    t = float(comm[0])
    for i in range(len(compute) - 1):
        dt = max(compute[i], comm[i + 1])
        steps.append({"layer": i, "fetch": i + 1, "start": t, "end": t + dt, "phase": "overlap"})
        t += dt
    steps.append({"layer": len(compute) - 1, "fetch": None, "start": t, "end": t + compute[-1],
                  "phase": "compute"})
    t += compute[-1]
    return {"schedule": steps, "duration": t}
