"""Experiment orchestration: synthetic tasks, training loops and checks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .config import ExperimentConfig
from .edit import (
    EmaStat,
    PenaltyConfig,
    SyncPolicy,
    WorkerReplica,
    local_round,
    should_sync,
    sync_round,
)
from .errors import NumericalInstabilityError, RejectedInputError
from .model import loss_and_grads, predict
from .moe import MoEConfig, RouterState, init_params
from .numcore import RngStream, digest, finite_diff_grad, relative_error
from .optim import AdamWState, BatchSizeSchedule, LrSchedule, adamw_step, batch_size_at, clip_global_norm
from .sim import StepTimeModel
from .spike import (
    NORMAL,
    PROCEED,
    SKIP_AND_RETRY,
    SKIP_RETRY_AND_BACKOFF,
    RetryQueue,
    SpikeDetector,
    StepContext,
    observe,
    on_spike,
    reinject,
)

METRIC_FIELDS = ("step", "worker", "loss", "task_loss", "lr", "effective_lr", "batch_size",
                 "balance_loss", "z_loss", "load_entropy", "classification", "action",
                 "sim_time", "eval_loss")


# ------------------------------------------------------------------------ task

@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    teacher: dict
    kind: str


def teacher_outputs(teacher: dict, x: np.ndarray, model: MoEConfig) -> np.ndarray:
    # teacher routes with learned logits only (no warmup)
    logits, *_ = predict(teacher, x, RouterState(), RngStream(0, "teacher-noise"), model)
    return logits


def generate_task(spec, model: MoEConfig, rng: RngStream) -> Dataset:
    """Teacher-student data from a frozen random MoE of the student's shape."""
    teacher = init_params(model, rng.spawn("teacher"))
    xin = rng.spawn("inputs")
    x = spec.input_std * xin.normal((spec.n_samples, model.d_model))
    xe = spec.input_std * xin.normal((spec.n_eval, model.d_model))
    y = teacher_outputs(teacher, x, model)
    ye = teacher_outputs(teacher, xe, model)
    if spec.kind == "regression":
        if spec.target_noise > 0:
            noise = rng.spawn("target-noise")
            y = y + spec.target_noise * noise.normal(y.shape)
            ye = ye + spec.target_noise * noise.normal(ye.shape)
    elif spec.kind == "classification":
        y = np.argmax(y, axis=1)
        ye = np.argmax(ye, axis=1)
    else:
        raise RejectedInputError(f"unknown task kind {spec.kind!r}")
    return Dataset(x, y, xe, ye, teacher, spec.kind)


# ------------------------------------------------------------------ scheduling

class DataScheduler:
    """Upcoming batch ids for one worker, with retry re-injection."""

    def __init__(self, n_fresh: int, retry_rng: RngStream, horizon: int):
        self.schedule = [(i, False) for i in range(n_fresh)]
        self.pos = 0
        self.queue = RetryQueue(retry_rng, horizon)
        self.consumed = 0
        self.n_fresh = n_fresh

    def next(self) -> tuple[int, bool]:
        if self.pos >= len(self.schedule):
            # past the planned budget: keep drawing fresh ids
            self.schedule.append((self.n_fresh + self.pos, False))
        entry = self.schedule[self.pos]
        self.pos += 1
        self.consumed += 1
        return entry

    def flush_retries(self) -> list[int]:
        if not self.queue.pending:
            return []
        tail, offsets = reinject(self.queue, self.schedule[self.pos:])
        self.schedule = self.schedule[:self.pos] + tail
        return offsets

    def unconsumed(self) -> list:
        return self.schedule[self.pos:] + [(b, True) for b, _ in self.queue.pending]


@dataclass
class Learner(WorkerReplica):
    noise_rng: RngStream | None = None
    data_rng: RngStream | None = None
    detector: SpikeDetector | None = None
    scheduler: DataScheduler | None = None
    step: int = 0
    sim_time: float = 0.0
    step_time: StepTimeModel | None = None
    time_rng: RngStream | None = None


@dataclass
class RunResult:
    params: dict
    router_state: RouterState
    opt_state: AdamWState | None
    metrics: list = field(default_factory=list)
    spike_log: list = field(default_factory=list)
    sync_log: list = field(default_factory=list)
    eval_trace: list = field(default_factory=list)  # (step, eval_loss)
    final_eval: float = float("nan")
    initial_eval: float = float("nan")
    learners: list = field(default_factory=list)


# --------------------------------------------------------------------- trainer

class Trainer:
    def __init__(self, cfg: ExperimentConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.model = cfg.model
        self.data = dataset or generate_task(cfg.task, cfg.model, RngStream(cfg.seed, "task"))
        t = cfg.train
        self.lr_schedule = LrSchedule(kind=t.lr_kind, max_lr=t.max_lr, warmup_steps=t.warmup_steps,
                                      halve_fraction=t.halve_fraction, start_lr=t.anneal_start,
                                      end_lr=t.anneal_end)
        self.batch_schedule = None
        if t.batch_initial > 0:
            self.batch_schedule = BatchSizeSchedule(t.batch_initial, t.batch_maximum,
                                                    tuple(t.batch_boundaries))
        self.metrics: list = []
        self.spike_log: list = []
        self.eval_rng_seed = cfg.seed

    # setup

    def init_params(self) -> dict:
        return init_params(self.model, RngStream(self.cfg.seed, "init"))

    def new_opt(self, params) -> AdamWState:
        t = self.cfg.train
        return AdamWState.zeros_like(params, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                                     weight_decay=t.weight_decay)

    def new_router(self) -> RouterState:
        return RouterState(warmup_horizon=self.model.warmup_horizon)

    def new_learner(self, worker_id: int, params: dict, n_fresh: int) -> Learner:
        s = self.cfg.spike
        base = RngStream(self.cfg.seed, "data").spawn(f"worker-{worker_id}")
        det = SpikeDetector(window_size=s.window, narrow_k=s.narrow_k, wide_run_len=s.wide_run_len,
                            wide_k=s.wide_k, min_history=s.min_history)
        return Learner(
            worker_id=worker_id,
            params={k: v.copy() for k, v in params.items()},
            opt_state=self.new_opt(params),
            router_state=self.new_router(),
            noise_rng=RngStream(self.cfg.seed, "routing-noise").spawn(f"worker-{worker_id}"),
            data_rng=base,
            detector=det,
            scheduler=DataScheduler(n_fresh, RngStream(self.cfg.seed, "retry").spawn(f"worker-{worker_id}"),
                                    s.retry_horizon),
        )

    # helpers

    def lr_at(self, step: int) -> float:
        return self.lr_schedule.lr(step, self.cfg.train.total_steps)

    def batch_size_at(self, step: int) -> int:
        if self.batch_schedule is None:
            return self.cfg.task.tokens_per_batch
        return batch_size_at(step, self.batch_schedule)

    def batch(self, learner: Learner, batch_id: int, size: int):
        rows = learner.data_rng.spawn(batch_id).permutation(self.data.inputs.shape[0])[:size]
        return self.data.inputs[rows], self.data.targets[rows]

    def evaluate(self, params: dict, router_state: RouterState) -> float:
        # fresh noise stream so evaluation never perturbs training draws
        state = replace(router_state, global_step=max(router_state.global_step, 0))
        br, _, _ = loss_and_grads(params, self.data.eval_inputs, self.data.eval_targets,
                                  replace(state, warmup_horizon=0), RngStream(self.eval_rng_seed, "eval"),
                                  self.model, self.data.kind, 0.0, 0.0, need_grads=False)
        return br.task

    def _forward(self, learner: Learner, params: dict, router_state: RouterState, x, y, poison):
        t = self.cfg.train
        return loss_and_grads(params, x, y, router_state, learner.noise_rng, self.model, self.data.kind,
                              t.lambda_bal, t.lambda_z, poison_scale=poison)

    def _apply(self, params, opt, grads, lr):
        clipped, norm = clip_global_norm(grads, self.cfg.train.clip_norm)
        new_params, new_opt = adamw_step(params, clipped, opt, lr)
        return new_params, new_opt, norm

    def _poisoned(self, learner: Learner, step: int, is_retry: bool):
        s = self.cfg.spike
        if s.poison_step is not None and step == s.poison_step and learner.worker_id == s.poison_worker \
                and not is_retry:
            return s.poison_scale
        return None

    def _guard(self, learner: Learner, loss: float, batch_id: int, step: int, is_retry: bool):
        if not self.cfg.spike.enabled:
            if not math.isfinite(loss):
                raise NumericalInstabilityError(
                    f"non-finite loss at step {step} on worker {learner.worker_id}", layer="loss")
            return NORMAL, PROCEED
        cls = observe(learner.detector, loss)
        return cls, on_spike(cls, batch_id, StepContext(step, is_retry))

    # one local step

    def local_step(self, learner: Learner, _batch=None) -> dict:
        # ``_batch`` is the local_round slot; batches come from the learner's scheduler
        batch_id, is_retry = learner.scheduler.next()
        step = learner.step
        size = self.batch_size_at(step)
        x, y = self.batch(learner, batch_id, size)
        lr = self.lr_at(step)
        rstate = replace(learner.router_state, global_step=step)
        br, grads, new_router = self._forward(learner, learner.params, rstate, x, y,
                                              self._poisoned(learner, step, is_retry))
        cls, action = self._guard(learner, br.total, batch_id, step, is_retry)
        eff_lr = lr
        before = None
        if action != PROCEED:
            before = digest(learner.params)
        if action == SKIP_AND_RETRY or not math.isfinite(br.total):
            eff_lr = 0.0
            if not is_retry:
                learner.scheduler.queue.enqueue(batch_id, step)
        else:
            if action == SKIP_RETRY_AND_BACKOFF:
                eff_lr = lr * self.cfg.spike.backoff
            learner.params, learner.opt_state, _ = self._apply(learner.params, learner.opt_state, grads, eff_lr)
            learner.router_state = new_router
        learner.step += 1
        if learner.step_time is not None:
            learner.sim_time += learner.step_time.sample(learner.time_rng)
        learner.loss_trace.append(br.total)
        rec = self._record(step, learner.worker_id, br, lr, eff_lr, size, cls, action, learner.sim_time)
        if action != PROCEED or cls != NORMAL:
            self.spike_log.append({
                "step": step, "worker": learner.worker_id, "loss": br.total, "classification": cls,
                "action": action, "effective_lr": eff_lr, "batch_id": batch_id, "retry": is_retry,
                "digest_before": before, "digest_after": digest(learner.params) if before else None,
            })
        learner.scheduler.flush_retries()
        return rec

    def _record(self, step, worker, br, lr, eff_lr, size, cls, action, sim_time, eval_loss=None) -> dict:
        load = br.report.expert_load
        nz = load[load > 0]
        rec = dict.fromkeys(METRIC_FIELDS)
        rec.update(step=step, worker=worker, loss=br.total, task_loss=br.task, lr=lr, effective_lr=eff_lr,
                   batch_size=size, balance_loss=br.balance, z_loss=br.z,
                   load_entropy=float(-np.sum(nz * np.log(nz))), classification=cls, action=action,
                   sim_time=sim_time, eval_loss=eval_loss)
        self.metrics.append(rec)
        return rec

    def _maybe_eval(self, result: RunResult, step: int, params, router_state, rec=None):
        every = self.cfg.train.eval_every
        if every > 0 and (step % every == 0 or step == self.cfg.train.total_steps):
            ev = self.evaluate(params, router_state)
            result.eval_trace.append((step, ev))
            if rec is not None:
                rec["eval_loss"] = ev

    # loops

    def run_single(self, total_steps: int | None = None) -> RunResult:
        n = self.cfg.train.total_steps if total_steps is None else total_steps
        params = self.init_params()
        learner = self.new_learner(0, params, n)
        res = RunResult(params, learner.router_state, learner.opt_state)
        res.initial_eval = self.evaluate(learner.params, learner.router_state)
        for _ in range(n):
            rec = self.local_step(learner)
            self._maybe_eval(res, learner.step, learner.params, learner.router_state, rec)
        res.params, res.router_state, res.opt_state = learner.params, learner.router_state, learner.opt_state
        res.final_eval = self.evaluate(learner.params, learner.router_state)
        res.metrics, res.spike_log, res.learners = self.metrics, self.spike_log, [learner]
        return res

    def run_sync(self, n_workers: int, total_steps: int | None = None) -> RunResult:
        """All-reduce baseline: average the workers' gradients every step."""
        n = self.cfg.train.total_steps if total_steps is None else total_steps
        params = self.init_params()
        learners = [self.new_learner(w, params, n) for w in range(n_workers)]
        opt = self.new_opt(params)
        router = self.new_router()
        res = RunResult(params, router, opt)
        res.initial_eval = self.evaluate(params, router)
        lead = learners[0]
        t = self.cfg.train
        for step in range(n):
            lr = self.lr_at(step)
            size = self.batch_size_at(step)
            rstate = replace(router, global_step=step)
            outs = []
            for lw in learners:
                batch_id, is_retry = lw.scheduler.next()
                x, y = self.batch(lw, batch_id, size)
                br, g, nr = self._forward(lw, params, rstate, x, y, self._poisoned(lw, step, is_retry))
                outs.append((batch_id, is_retry, br, g, nr))
            mean_loss = math.fsum(o[2].total for o in outs) / n_workers
            cls, action = self._guard(lead, mean_loss, outs[0][0], step, outs[0][1])
            eff_lr = lr
            if action == SKIP_AND_RETRY or not math.isfinite(mean_loss):
                eff_lr = 0.0
                for lw, o in zip(learners, outs):
                    if not o[1]:
                        lw.scheduler.queue.enqueue(o[0], step)
            else:
                if action == SKIP_RETRY_AND_BACKOFF:
                    eff_lr = lr * self.cfg.spike.backoff
                grads = {}
                for k in params:
                    acc = outs[0][3][k]
                    for o in outs[1:]:
                        acc = acc + o[3][k]
                    grads[k] = acc / n_workers
                params, opt, _ = self._apply(params, opt, grads, eff_lr)
                router = outs[0][4]
            for lw in learners:
                lw.scheduler.flush_retries()
            br0 = outs[0][2]
            rec = self._record(step, -1, br0, lr, eff_lr, size, cls, action, 0.0)
            rec["loss"] = mean_loss
            if action != PROCEED or cls != NORMAL:
                self.spike_log.append({"step": step, "worker": -1, "loss": mean_loss, "classification": cls,
                                       "action": action, "effective_lr": eff_lr})
            self._maybe_eval(res, step + 1, params, router, rec)
        res.params, res.router_state, res.opt_state = params, router, opt
        res.final_eval = self.evaluate(params, router)
        res.metrics, res.spike_log, res.learners = self.metrics, self.spike_log, learners
        return res

    def run_edit(self, total_steps: int | None = None) -> RunResult:
        """Elastic local updates with periodic or time-triggered merges."""
        e = self.cfg.edit
        n = self.cfg.train.total_steps if total_steps is None else total_steps
        policy = SyncPolicy(e.policy, e.H, e.tau)
        penalty = PenaltyConfig(enabled=e.penalty, ema_decay=e.ema_decay,
                                anomaly_multiplier=e.anomaly_multiplier, clip_threshold=e.clip_threshold,
                                epsilon=e.epsilon, warmup_rounds=e.penalty_warmup_rounds,
                                weighting=e.weighting)
        corrupt = {int(k): (int(v[0]), float(v[1])) for k, v in e.corrupt.items()}
        absent = {int(k): int(v) for k, v in e.absent.items()}
        anchor = self.init_params()
        learners = [self.new_learner(w, anchor, n) for w in range(e.n_workers)]
        if policy.kind == "time_threshold":
            for lw in learners:
                base = e.step_times[lw.worker_id] if e.step_times else 1.0
                lw.step_time = StepTimeModel(base_step_time=base)
                lw.time_rng = RngStream(self.cfg.seed, "sim-time").spawn(lw.worker_id + 1)
        res = RunResult(anchor, learners[0].router_state, None)
        res.initial_eval = self.evaluate(anchor, learners[0].router_state)
        ema: dict[int, EmaStat] = {}
        momentum = None
        rnd = 0
        done = 0
        while True:
            if policy.kind == "every_H_steps":
                if done >= n:
                    break
                steps = min(policy.H, n - done)
                for lw in learners:
                    local_round(lw, [None] * steps, steps, self.local_step)
                done += steps
            else:
                if rnd >= e.rounds:
                    break
                for lw in learners:
                    start = lw.sim_time
                    while not should_sync(policy, lw.local_step_count, lw.sim_time - start):
                        local_round(lw, [None], 1, self.local_step)
            r_absent = {w for w, start in absent.items() if rnd >= start}
            r_corrupt = {w: f for w, (start, f) in corrupt.items() if rnd >= start}
            local_counts = {str(lw.worker_id): lw.local_step_count for lw in learners}
            out = sync_round(anchor, learners, ema, penalty, e.outer_lr, e.outer_momentum, momentum,
                             rnd, r_absent, r_corrupt)
            anchor, ema, momentum = out.anchor, out.ema_states, out.momentum
            rec = out.record
            rec["local_steps"] = local_counts
            rec["anchor_loss"] = self.evaluate(anchor, learners[0].router_state)
            res.sync_log.append(rec)
            res.eval_trace.append((learners[0].step, rec["anchor_loss"]))
            rnd += 1
        res.params = anchor
        res.router_state = learners[0].router_state
        res.opt_state = learners[0].opt_state
        res.final_eval = self.evaluate(anchor, learners[0].router_state)
        res.metrics, res.spike_log, res.learners = self.metrics, self.spike_log, learners
        return res


def run_training(cfg: ExperimentConfig, mode: str = "single", dataset: Dataset | None = None) -> RunResult:
    tr = Trainer(cfg, dataset)
    if mode == "single":
        return tr.run_single()
    if mode == "sync":
        return tr.run_sync(cfg.edit.n_workers)
    if mode == "edit":
        return tr.run_edit()
    raise RejectedInputError(f"unknown training mode {mode!r}")


# ------------------------------------------------------------------ grad check

GRAD_CHECK_MODEL = MoEConfig(d_model=8, n_experts=4, k_top=2, d_expert_hidden=4, d_shared_hidden=6,
                             vocab=5, warmup_horizon=10)


def run_grad_check(cfg: ExperimentConfig | None = None, n_instances: int = 20, tokens: int = 5,
                   tol: float = 1e-5, corrupt: str | None = None) -> dict:
    """Analytic vs central-difference gradients on random small instances.

    Instances alternate between a warmup router state (alpha < 1) and
    learned routing, with auxiliary losses weighted as configured.
    ``corrupt`` names a parameter group whose analytic gradient is
    perturbed, to exercise the failure path.
    """
    cfg = cfg or ExperimentConfig(model=GRAD_CHECK_MODEL)
    model = cfg.model
    n_params = sum(int(np.prod(v.shape)) for v in init_params(model, RngStream(0, "init")).values())
    if n_params > 1000:
        raise RejectedInputError(f"grad check needs <= 1000 parameters, config has {n_params}")
    lb, lz = cfg.train.lambda_bal, cfg.train.lambda_z
    worst: dict[str, float] = {}
    for inst in range(n_instances):
        rng = RngStream(cfg.seed * 1_000_003 + inst, "gradcheck")
        params = init_params(model, rng.spawn("params"))
        x = rng.normal((tokens, model.d_model))
        if cfg.task.kind == "classification":
            y = rng.integers(0, model.vocab, tokens)
        else:
            y = rng.normal((tokens, model.vocab))
        step = (inst * 3) % (2 * max(model.warmup_horizon, 1))
        state = RouterState(mu_s=0.1 * rng.normal(())[()], sigma_s=0.5 + abs(rng.normal(())[()]),
                            warmup_horizon=model.warmup_horizon, global_step=step, initialized=True)
        noise_seed = cfg.seed * 7 + inst

        def fresh():
            return RngStream(noise_seed, "routing-noise")

        _, grads, _ = loss_and_grads(params, x, y, state, fresh(), model, cfg.task.kind, lb, lz,
                                     with_input=True)
        if corrupt is not None:
            grads[corrupt] = grads[corrupt] + 1e-2 * (1.0 + np.abs(grads[corrupt]))
        for name in list(params) + ["input"]:
            def f(v, name=name):
                q = dict(params)
                xx = x
                if name == "input":
                    xx = v
                else:
                    q[name] = v
                return loss_and_grads(q, xx, y, state, fresh(), model, cfg.task.kind, lb, lz,
                                      need_grads=False)[0].total

            num = finite_diff_grad(f, x if name == "input" else params[name])
            err = relative_error(grads[name], num)
            worst[name] = max(worst.get(name, 0.0), err)
    groups = {k: {"max_relative_error": v, "pass": v < tol} for k, v in worst.items()}
    failed = sorted(k for k, g in groups.items() if not g["pass"])
    return {"n_instances": n_instances, "tolerance": tol, "groups": groups,
            "failed_groups": failed, "pass": not failed}


# -------------------------------------------------------------------- outputs

def write_jsonl(path, records) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def save_checkpoint(path, result: RunResult, cfg: ExperimentConfig) -> None:
    meta = {"model": cfg.model.to_dict(), "router_state": result.router_state.to_dict(), "seed": cfg.seed}
    checkpoint.save(path, result.params, meta, result.opt_state)


# ---------------------------------------------------------------- spike runs

def _excursion(trace: list, clean: list, after: int) -> float:
    ref = dict(clean)
    gaps = [v - ref[s] for s, v in trace if s > after and s in ref]
    return max(gaps) if gaps else 0.0


def spike_scenario(cfg: ExperimentConfig, dataset: Dataset | None = None) -> dict:
    """Clean, guarded and unguarded runs around one poisoned batch.

    The excursion of a run is the largest post-poison gap between its eval
    loss and the clean run's eval loss at the same step. Skipped steps are
    checked for unchanged parameter digests.
    """
    if cfg.spike.poison_step is None:
        raise RejectedInputError("spike scenario needs spike.poison_step")
    data = dataset or generate_task(cfg.task, cfg.model, RngStream(cfg.seed, "task"))
    base = replace(cfg, train=replace(cfg.train, eval_every=1))
    clean_cfg = replace(base, spike=replace(cfg.spike, poison_step=None, enabled=True))
    guarded_cfg = replace(base, spike=replace(cfg.spike, enabled=True))
    unguarded_cfg = replace(base, spike=replace(cfg.spike, enabled=False))
    runs = {name: Trainer(c, data).run_single()
            for name, c in (("clean", clean_cfg), ("guarded", guarded_cfg), ("unguarded", unguarded_cfg))}
    p = cfg.spike.poison_step
    g = runs["guarded"]
    skips = [e for e in g.spike_log if e["action"] == SKIP_AND_RETRY]
    report = {
        "poison_step": p,
        "final_eval_loss": {k: r.final_eval for k, r in runs.items()},
        "excursion": {k: _excursion(runs[k].eval_trace, runs["clean"].eval_trace, p)
                      for k in ("guarded", "unguarded")},
        "guarded_wide_skips": len(skips),
        "skip_digests_unchanged": all(e["digest_before"] == e["digest_after"] for e in skips),
        "guarded_vs_clean_final": g.final_eval / runs["clean"].final_eval - 1.0,
    }
    for k, r in runs.items():
        report[f"_{k}_metrics"] = r.metrics
    report["_spike_log"] = g.spike_log
    return report
