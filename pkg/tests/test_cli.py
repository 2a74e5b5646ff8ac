import json

import pytest

from moetrain.cli import COMMANDS

from cli_helpers import run_cli, tree_bytes

ARTIFACTS = {
    "grad-check": ["grad_check.json"],
    "train": ["metrics.jsonl", "spikes.jsonl", "checkpoint.bin", "checkpoint.json", "summary.json"],
    "edit-train": ["metrics.jsonl", "sync.jsonl", "checkpoint.bin", "summary.json"],
    "inject-spike": ["metrics_clean.jsonl", "metrics_guarded.jsonl", "metrics_unguarded.jsonl",
                     "spikes.jsonl", "summary.json"],
    "simulate-cluster": ["trace_baseline.csv", "trace_edit.csv", "summary.json"],
    "fit-scaling": ["fit.json"],
    "cost": ["cost.json"],
}

EXTRA = {"grad-check": ["--instances", "2"]}


def test_commands_table_complete():
    assert set(COMMANDS) == set(ARTIFACTS)


@pytest.mark.parametrize("command", sorted(ARTIFACTS))
def test_subcommand_outputs(tmp_path, command):
    code, out, d = run_cli(tmp_path, command, extra=EXTRA.get(command, ()))
    assert code == 0 and "error" not in out
    for name in ["config.json", *ARTIFACTS[command]]:
        assert (d / name).is_file(), name


def test_cost_summary_values(tmp_path):
    _, out, _ = run_cli(tmp_path, "cost")
    assert out["config_a_rmb"] == 6.3525e6 and out["config_b_rmb"] == 5.08e6
    assert out["savings_percent"] == pytest.approx(20.03, abs=0.01)


def test_train_workers_flag_runs_sync(tmp_path):
    _, out, d = run_cli(tmp_path, "train", extra=["--workers", "3"])
    assert out["mode"] == "sync"
    assert json.loads((d / "config.json").read_text())["edit"]["n_workers"] == 3


def test_inject_spike_defaults_poison_to_midpoint(tmp_path):
    _, out, d = run_cli(tmp_path, "inject-spike")
    assert out["poison_step"] == 10
    assert json.loads((d / "config.json").read_text())["spike"]["poison_step"] == 10


def test_seed_flag_overrides(tmp_path):
    run_cli(tmp_path, "cost", extra=["--seed", "42"])
    assert json.loads((tmp_path / "out" / "config.json").read_text())["seed"] == 42


@pytest.mark.parametrize("config,kind", [
    ({"train": {"nope": 1}}, "rejected_input"),
    ({"schema_version": 2}, "rejected_input"),
    ({"cost": {"config_a": [{"device": "Q", "count": 1, "hours": 1}]}}, "rejected_input"),
    ({"fit": {"csv": "missing.csv"}}, "FileNotFoundError"),
])
def test_errors_are_json_and_nonzero(tmp_path, config, kind):
    cmd = "fit-scaling" if "fit" in config else "cost"
    code, out, _ = run_cli(tmp_path, cmd, config)
    assert code == 2
    assert out["error"]["error"] == kind and out["error"]["message"]


def test_grad_check_failure_exit_code(tmp_path, monkeypatch):
    from moetrain import harness

    real = harness.run_grad_check
    monkeypatch.setattr(harness, "run_grad_check",
                        lambda cfg, n_instances: real(cfg, n_instances=1, corrupt="router"))
    code, out, _ = run_cli(tmp_path, "grad-check")
    assert code == 1
    assert out["error"]["error"] == "oracle_failure" and out["report"]["failed_groups"] == ["router"]


@pytest.mark.parametrize("command", ["train", "edit-train", "simulate-cluster", "fit-scaling", "cost"])
def test_reruns_byte_identical(tmp_path, command):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    run_cli(a, command)
    run_cli(b, command)
    ta, tb = tree_bytes(a / "out"), tree_bytes(b / "out")
    assert ta.keys() == tb.keys() and ta == tb
