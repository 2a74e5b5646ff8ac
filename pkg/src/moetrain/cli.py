"""Command-line entry point.

Every subcommand reads an optional JSON config (``--config``), applies
``--seed`` / ``--out-dir`` overrides, writes its artifacts under the output
directory and prints a JSON summary. Failures print ``{"error": ...}`` and
exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ExperimentConfig
from .edit import SyncPolicy, layerwise_sync_plan
from .errors import MoETrainError
from .numcore import RngStream
from .scaling import fit_report, read_records_csv, synthetic_records
from .sim import (
    StepTimeModel,
    compare_cost,
    device,
    estimate_cost,
    load_presets,
    simulate_edit,
    simulate_sync_baseline,
    speedup_ratio,
    straggler_sweep,
)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _train_outputs(out: Path, cfg: ExperimentConfig, res: harness.RunResult, mode: str) -> dict:
    harness.write_jsonl(out / "metrics.jsonl", res.metrics)
    harness.write_jsonl(out / "spikes.jsonl", res.spike_log)
    if res.sync_log:
        harness.write_jsonl(out / "sync.jsonl", res.sync_log)
    harness.save_checkpoint(out / "checkpoint.bin", res, cfg)
    summary = {"mode": mode, "seed": cfg.seed, "initial_eval_loss": res.initial_eval,
               "final_eval_loss": res.final_eval, "steps": cfg.train.total_steps,
               "spike_events": len(res.spike_log), "sync_rounds": len(res.sync_log)}
    _dump(out / "summary.json", summary)
    return summary


class GradCheckFailed(MoETrainError):
    kind = "oracle_failure"

    def __init__(self, report):
        super().__init__("gradient check failed for: " + ", ".join(report["failed_groups"]))
        self.report = report


def cmd_grad_check(cfg, out: Path, args) -> dict:
    report = harness.run_grad_check(cfg, n_instances=args.instances)
    _dump(out / "grad_check.json", report)
    if not report["pass"]:
        raise GradCheckFailed(report)
    return report


def cmd_train(cfg, out, args) -> dict:
    mode = "sync" if args.workers > 1 else "single"
    return _train_outputs(out, cfg, harness.run_training(cfg, mode), mode)


def cmd_edit_train(cfg, out, args) -> dict:
    return _train_outputs(out, cfg, harness.run_training(cfg, "edit"), "edit")


def cmd_inject_spike(cfg, out, args) -> dict:
    report = harness.spike_scenario(cfg)
    for name in ("clean", "guarded", "unguarded"):
        harness.write_jsonl(out / f"metrics_{name}.jsonl", report.pop(f"_{name}_metrics"))
    harness.write_jsonl(out / "spikes.jsonl", report.pop("_spike_log"))
    _dump(out / "summary.json", report)
    return report


def cmd_simulate(cfg, out, args) -> dict:
    s = cfg.sim
    slow = s.slowdowns or [1.0] * s.n_workers
    models = [StepTimeModel(s.base_step_time, s.straggle_probability, s.straggle_multiplier, sd)
              for sd in slow]
    base = simulate_sync_baseline(s.n_workers, models, s.total_steps, RngStream(cfg.seed, "sim-time"),
                                  s.comm_time)
    edit = simulate_edit(s.n_workers, models, SyncPolicy("time_threshold", tau=s.tau), s.rounds,
                         RngStream(cfg.seed, "sim-time"), s.layer_compute or None, s.layer_comm or None,
                         s.comm_time)
    (out / "trace_baseline.csv").write_text(base.to_csv())
    (out / "trace_edit.csv").write_text(edit.to_csv())
    sweep = straggler_sweep(s.n_workers, StepTimeModel(s.base_step_time, s.straggle_probability),
                            s.sweep, cfg.seed, s.tau, s.total_steps, s.rounds, s.comm_time)
    summary = {"throughput": {"baseline": base.throughput, "edit": edit.throughput},
               "speedup": speedup_ratio(edit.throughput, base.throughput),
               "sweep": {"multipliers": s.sweep, "speedup": sweep},
               "cost": _cost_summary(cfg)}
    if s.layer_comm:
        summary["layer_plan"] = layerwise_sync_plan(s.layer_compute or [0.0] * len(s.layer_comm), s.layer_comm)
    _dump(out / "summary.json", summary)
    return summary


def _config_total(entries, overrides) -> float:
    total = 0.0
    for e in entries:
        if "total" in e:
            total += float(e["total"])
        else:
            total += estimate_cost(device(e["device"], overrides), e["count"], e["hours"])
    return total


def _cost_summary(cfg) -> dict:
    c = cfg.cost
    a = _config_total(c.config_a, c.devices)
    b = _config_total(c.config_b, c.devices)
    return {"config_a_rmb": a, "config_b_rmb": b, "savings_percent": compare_cost(a, b)}


def cmd_cost(cfg, out, args) -> dict:
    summary = _cost_summary(cfg)
    summary["devices"] = {k: v.to_dict() for k, v in sorted(load_presets(cfg.cost.devices).items())}
    _dump(out / "cost.json", summary)
    return summary


def cmd_fit(cfg, out, args) -> dict:
    f = cfg.fit
    if f.csv:
        records = read_records_csv(f.csv)
    else:
        records = synthetic_records(RngStream(cfg.seed, "task").spawn("scaling"), f.noise, f.n_points)
    report = fit_report(records, f.accounting)
    _dump(out / "fit.json", report)
    return report


COMMANDS = {
    "grad-check": cmd_grad_check,
    "train": cmd_train,
    "edit-train": cmd_edit_train,
    "inject-spike": cmd_inject_spike,
    "simulate-cluster": cmd_simulate,
    "fit-scaling": cmd_fit,
    "cost": cmd_cost,
}


def resolve(cfg: ExperimentConfig, args, explicit_model: bool) -> ExperimentConfig:
    """Command-specific defaults, applied before the config is saved."""
    if args.command == "grad-check" and not explicit_model:
        cfg = replace(cfg, model=harness.GRAD_CHECK_MODEL)
    if args.command == "train" and args.workers > 1:
        cfg = replace(cfg, edit=replace(cfg.edit, n_workers=args.workers))
    if args.command == "inject-spike" and cfg.spike.poison_step is None:
        cfg = replace(cfg, spike=replace(cfg.spike, poison_step=cfg.train.total_steps // 2))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moetrain", description="MoE training experiments at desk scale")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        if name == "train":
            sp.add_argument("--workers", type=int, default=1, help="> 1 runs the synchronous baseline")
        if name == "grad-check":
            sp.add_argument("--instances", type=int, default=20)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
        cfg = ExperimentConfig.from_dict(raw)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out_dir is not None:
            cfg = replace(cfg, out_dir=args.out_dir)
        cfg = resolve(cfg, args, "model" in raw)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.dumps())
        result = COMMANDS[args.command](cfg, out, args)
    except GradCheckFailed as e:
        print(json.dumps({"error": e.to_dict(), "report": e.report}, sort_keys=True))
        return 1
    except (MoETrainError, ValueError, OSError, KeyError, TypeError) as e:
        err = e.to_dict() if isinstance(e, MoETrainError) else {"error": type(e).__name__, "message": str(e)}
        print(json.dumps({"error": err}, sort_keys=True))
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
