"""Discrete-time cluster simulation: synchronous baseline vs elastic local updates,
plus accelerator cost accounting."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

from .edit import SyncPolicy, layerwise_sync_plan, should_sync
from .errors import RejectedInputError
from .numcore import RngStream


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    peak_flops_T: float
    memory_gb: float
    cost_per_hour_rmb: float
    supports_fp8: bool

    def __post_init__(self):
        if min(self.peak_flops_T, self.memory_gb, self.cost_per_hour_rmb) <= 0:
            raise RejectedInputError(f"device {self.name}: numeric fields must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


DEVICE_PRESETS = {
    "A": DeviceProfile("A", 370, 64, 7.0, False),
    "B": DeviceProfile("B", 120, 96, 4.5, False),
    "C": DeviceProfile("C", 312, 80, 10.0, False),
    "D": DeviceProfile("D", 989, 80, 27.5, True),
    "E": DeviceProfile("E", 147, 96, 5.64, True),
}


def load_presets(overrides: dict | None = None) -> dict[str, DeviceProfile]:
    """Built-in presets with per-field overrides, e.g. ``{"B": {"cost_per_hour_rmb": 4.0}}``."""
    presets = dict(DEVICE_PRESETS)
    for name, fields in (overrides or {}).items():
        if name in presets:
            presets[name] = replace(presets[name], **fields)
        else:
            presets[name] = DeviceProfile(name=name, **fields)
    return presets


def device(name: str, overrides: dict | None = None) -> DeviceProfile:
    presets = load_presets(overrides)
    if name not in presets:
        raise RejectedInputError(f"unknown device {name!r}")
    return presets[name]


def estimate_cost(profile: DeviceProfile, device_count: float, hours: float) -> float:
    if device_count <= 0 or hours <= 0:
        raise RejectedInputError("device_count and hours must be positive")
    return device_count * hours * profile.cost_per_hour_rmb


def compare_cost(cost_a, cost_b) -> float:
    """Savings of ``b`` relative to ``a`` in percent.

    Each argument is either a total or a ``(profile, device_count, hours)`` tuple.
    """
    a = estimate_cost(*cost_a) if isinstance(cost_a, tuple) else float(cost_a)
    b = estimate_cost(*cost_b) if isinstance(cost_b, tuple) else float(cost_b)
    if a <= 0 or b <= 0:
        raise RejectedInputError("costs must be positive")
    return (a - b) / a * 100.0


def device_hours_for_tokens(tokens: float, profile: DeviceProfile, hours_per_token_ref: float,
                            ref_flops_T: float = DEVICE_PRESETS["D"].peak_flops_T) -> float:
    """Device-hours for ``tokens``, scaling a reference calibration by peak FLOPS."""
    if tokens <= 0 or hours_per_token_ref <= 0:
        raise RejectedInputError("tokens and calibration must be positive")
    return tokens * hours_per_token_ref * ref_flops_T / profile.peak_flops_T


@dataclass(frozen=True)
class StepTimeModel:
    base_step_time: float = 1.0
    straggle_probability: float = 0.0
    straggle_multiplier: float = 1.0
    slowdown: float = 1.0

    def __post_init__(self):
        if self.base_step_time <= 0:
            raise RejectedInputError("base_step_time must be positive")
        if not 0.0 <= self.straggle_probability <= 1.0:
            raise RejectedInputError("straggle_probability must lie in [0, 1]")
        if self.straggle_multiplier < 1.0 or self.slowdown < 1.0:
            raise RejectedInputError("multipliers must be >= 1")

    def sample(self, rng: RngStream) -> float:
        # one uniform per step regardless of parameters (common random numbers)
        u = rng.uniform()
        t = self.base_step_time * self.slowdown
        return t * self.straggle_multiplier if u < self.straggle_probability else t

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SimTrace:
    events: list = field(default_factory=list)  # (worker, start, end, kind)
    total_time: float = 0.0
    throughput: float = 0.0
    local_steps: list | None = None

    def add(self, worker: int, start: float, end: float, kind: str) -> None:
        if end > start:
            self.events.append((worker, start, end, kind))

    def worker_events(self, worker: int) -> list:
        return [e for e in self.events if e[0] == worker]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["worker", "kind", "start", "end"])
        for worker, start, end, kind in self.events:
            w.writerow([worker, kind, repr(start), repr(end)])
        return buf.getvalue()


def _models(models, n_workers: int) -> list[StepTimeModel]:
    if n_workers < 1:
        raise RejectedInputError("n_workers must be >= 1")
    if isinstance(models, StepTimeModel):
        return [models] * n_workers
    models = list(models)
    if len(models) != n_workers:
        raise RejectedInputError("need one step-time model per worker")
    return models


def _worker_streams(rng: RngStream, n_workers: int) -> list[RngStream]:
    return [rng.spawn(1 + w) for w in range(n_workers)]


def simulate_sync_baseline(n_workers: int, models, total_steps: int, rng: RngStream,
                           comm_time: float = 0.0) -> SimTrace:
    """Lock-step training: each step waits for the slowest worker, then communicates."""
    models = _models(models, n_workers)
    streams = _worker_streams(rng, n_workers)
    trace = SimTrace()
    now = 0.0
    for _ in range(total_steps):
        times = [m.sample(s) for m, s in zip(models, streams)]
        slowest = max(times)
        for w, t in enumerate(times):
            trace.add(w, now, now + t, "compute")
            trace.add(w, now + t, now + slowest, "idle")
        end = now + slowest
        if comm_time > 0:
            for w in range(n_workers):
                trace.add(w, end, end + comm_time, "comm")
            end = end + comm_time
        now = end
    trace.total_time = now
    trace.throughput = total_steps / now if now > 0 else 0.0
    return trace


def merge_cost(layer_compute: list[float] | None, layer_comm: list[float] | None,
               comm_time: float = 0.0) -> float:
    if layer_comm:
        compute = layer_compute if layer_compute else [0.0] * len(layer_comm)
        return layerwise_sync_plan(compute, layer_comm)["duration"]
    return comm_time


def simulate_edit(n_workers: int, models, policy: SyncPolicy, total_rounds: int, rng: RngStream,
                  layer_compute: list[float] | None = None, layer_comm: list[float] | None = None,
                  comm_time: float = 0.0) -> SimTrace:
    """Rounds of local steps ended by ``policy``, followed by a merge.

    Throughput is local steps per worker per unit time, which makes it
    directly comparable with the baseline's global steps per unit time.
    """
    models = _models(models, n_workers)
    streams = _worker_streams(rng, n_workers)
    merge = merge_cost(layer_compute, layer_comm, comm_time)
    trace = SimTrace(local_steps=[0] * n_workers)
    now = 0.0
    for _ in range(total_rounds):
        finish = []
        for w, (m, s) in enumerate(zip(models, streams)):
            durations = []
            t = now
            steps = 0
            while not should_sync(policy, steps, math.fsum(durations)):
                dt = m.sample(s)
                trace.add(w, t, t + dt, "compute")
                t = t + dt
                durations.append(dt)
                steps += 1
            trace.local_steps[w] += steps
            finish.append(t)
        round_end = max(finish)
        for w, t in enumerate(finish):
            trace.add(w, t, round_end, "idle")
            if merge > 0:
                trace.add(w, round_end, round_end + merge, "merge")
        now = round_end + merge
    trace.total_time = now
    total_local = sum(trace.local_steps)
    trace.throughput = total_local / (n_workers * now) if now > 0 else 0.0
    return trace


def speedup_ratio(edit_throughput: float, baseline_throughput: float) -> float:
    if baseline_throughput <= 0:
        raise RejectedInputError("baseline throughput must be positive")
    return (edit_throughput - baseline_throughput) / baseline_throughput * 100.0


def straggler_sweep(n_workers: int, base: StepTimeModel, multipliers: list[float], seed: int,
                    tau: float, total_steps: int, total_rounds: int, comm_time: float = 0.0) -> list[float]:
    """Speed-up (percent) for each straggle multiplier under common random numbers."""
    out = []
    for mult in multipliers:
        model = replace(base, straggle_multiplier=mult)
        b = simulate_sync_baseline(n_workers, model, total_steps, RngStream(seed, "sim-time"), comm_time)
        e = simulate_edit(n_workers, model, SyncPolicy("time_threshold", tau=tau), total_rounds,
                          RngStream(seed, "sim-time"), comm_time=comm_time)
        out.append(speedup_ratio(e.throughput, b.throughput))
    return out
