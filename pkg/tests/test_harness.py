import json
import statistics
from dataclasses import replace

import numpy as np
import pytest

from moetrain import checkpoint
from moetrain.config import ExperimentConfig
from moetrain.errors import NumericalInstabilityError, RejectedInputError
from moetrain.harness import (
    GRAD_CHECK_MODEL,
    METRIC_FIELDS,
    Trainer,
    generate_task,
    run_grad_check,
    run_training,
    save_checkpoint,
    spike_scenario,
    teacher_outputs,
)
from moetrain.numcore import RngStream, digest
from moetrain.spike import SKIP_AND_RETRY, SKIP_RETRY_AND_BACKOFF, WIDE


def _cfg(seed=0, **train):
    c = ExperimentConfig(seed=seed)
    c.train = replace(c.train, **train)
    return c


# task generation

def test_task_deterministic():
    c = ExperimentConfig()
    a = generate_task(c.task, c.model, RngStream(3, "task"))
    b = generate_task(c.task, c.model, RngStream(3, "task"))
    for k in ("inputs", "targets", "eval_inputs", "eval_targets"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    assert digest(a.teacher) == digest(b.teacher)


def test_task_seed_changes_data():
    c = ExperimentConfig()
    a = generate_task(c.task, c.model, RngStream(0, "task"))
    b = generate_task(c.task, c.model, RngStream(1, "task"))
    assert not np.array_equal(a.inputs, b.inputs)


def test_task_realizable_regression():
    tr = Trainer(ExperimentConfig())
    assert tr.evaluate(tr.data.teacher, tr.new_router()) == 0.0


def test_task_realizable_classification():
    c = ExperimentConfig()
    c.task = replace(c.task, kind="classification")
    d = generate_task(c.task, c.model, RngStream(0, "task"))
    pred = np.argmax(teacher_outputs(d.teacher, d.eval_inputs, c.model), axis=1)
    np.testing.assert_array_equal(pred, d.eval_targets)


@pytest.mark.parametrize("std", [1.0, 0.5])
def test_task_input_statistics(std):
    c = ExperimentConfig()
    spec = replace(c.task, n_samples=100_000, input_std=std)
    x = generate_task(spec, c.model, RngStream(0, "task")).inputs
    assert abs(x.mean()) < 0.01 * std
    assert abs(x.var() / std ** 2 - 1.0) < 0.01


def test_task_unknown_kind():
    c = ExperimentConfig()
    with pytest.raises(RejectedInputError):
        generate_task(replace(c.task, kind="ranking"), c.model, RngStream(0, "task"))


# training

def test_loss_halves_median_over_seeds():
    ratios = [(r.final_eval / r.initial_eval) for r in (run_training(_cfg(s)) for s in range(20))]
    assert statistics.median(ratios) < 0.5


@pytest.mark.parametrize("seed", range(3))
def test_block_smoothed_loss_decreasing(seed):
    # 500 steps as ten 50-step block means; 128 rows per batch
    c = _cfg(seed)
    c.task = replace(c.task, tokens_per_batch=128)
    loss = np.array([m["loss"] for m in run_training(c).metrics])
    blocks = loss.reshape(10, 50).mean(axis=1)
    assert np.all(np.diff(blocks) < 0)


def test_metrics_records():
    r = run_training(_cfg(total_steps=30))
    assert [m["step"] for m in r.metrics] == list(range(30))
    assert all(tuple(m) == METRIC_FIELDS for m in r.metrics)
    assert [s for s, _ in r.eval_trace] == [10, 20, 30]


def test_training_reproducible():
    a = run_training(_cfg(total_steps=40))
    b = run_training(_cfg(total_steps=40))
    assert json.dumps(a.metrics) == json.dumps(b.metrics)
    assert digest(a.params) == digest(b.params)


def test_zero_steps_checkpoint_is_init(tmp_path):
    c = _cfg(total_steps=0)
    r = run_training(c)
    save_checkpoint(tmp_path / "ck.bin", r, c)
    params, _, meta = checkpoint.load(tmp_path / "ck.bin")
    init = Trainer(c).init_params()
    assert digest(params) == digest(init)
    assert meta["seed"] == 0 and r.metrics == []


def test_checkpoint_roundtrip(tmp_path):
    c = _cfg(total_steps=5)
    r = run_training(c)
    save_checkpoint(tmp_path / "ck.bin", r, c)
    params, moments, meta = checkpoint.load(tmp_path / "ck.bin")
    for k, v in r.params.items():
        np.testing.assert_array_equal(params[k], v)
    assert moments and meta["optimizer"]["step"] == 5
    assert json.loads((tmp_path / "ck.json").read_text()) == meta


def test_spike_config_logs_wide_skip():
    c = ExperimentConfig()
    c.spike = replace(c.spike, poison_step=250)
    log = run_training(c).spike_log
    skips = [e for e in log if e["action"] == SKIP_AND_RETRY]
    assert skips and skips[0]["step"] == 250 and skips[0]["classification"] == WIDE
    assert skips[0]["effective_lr"] == 0.0
    assert skips[0]["digest_before"] == skips[0]["digest_after"]


def test_skipped_batch_is_retried():
    c = ExperimentConfig()
    c.spike = replace(c.spike, poison_step=250)
    r = run_training(c)
    sched = r.learners[0].scheduler
    consumed = sched.schedule[:sched.pos]
    assert (250, True) in consumed and consumed.count((250, False)) == 1


def test_retry_spike_backs_off(monkeypatch):
    tr = Trainer(_cfg(total_steps=3))
    calls = iter([(WIDE, SKIP_RETRY_AND_BACKOFF)] + [("normal", "proceed")] * 10)
    monkeypatch.setattr(tr, "_guard", lambda *a: next(calls))
    r = tr.run_single()
    m = r.metrics[0]
    assert m["action"] == SKIP_RETRY_AND_BACKOFF
    assert m["effective_lr"] == 0.5 * m["lr"]


def test_unguarded_nonfinite_aborts():
    c = ExperimentConfig()
    c.spike = replace(c.spike, enabled=False, poison_step=3, poison_scale=float("inf"))
    with np.errstate(invalid="ignore"), pytest.raises(NumericalInstabilityError) as e:
        run_training(c)
    assert e.value.to_dict()["error"] == "numerical_instability"


def test_unknown_mode():
    with pytest.raises(RejectedInputError):
        run_training(ExperimentConfig(), mode="async")


def test_sync_and_edit_modes_run():
    c = _cfg(total_steps=16)
    c.edit = replace(c.edit, n_workers=2)
    s = run_training(c, "sync")
    e = run_training(c, "edit")
    assert len(s.metrics) == 16 and len(e.sync_log) == 4
    assert e.final_eval < e.initial_eval


def test_edit_time_policy_faster_worker_steps_more():
    c = _cfg(total_steps=40)
    c.edit = replace(c.edit, n_workers=2, policy="time_threshold", tau=4.0, rounds=3, step_times=[1.0, 2.0])
    r = run_training(c, "edit")
    assert [rec["local_steps"] for rec in r.sync_log] == [{"0": 4, "1": 2}] * 3


# spike scenario

def test_spike_scenario_report():
    c = ExperimentConfig()
    c.train = replace(c.train, total_steps=120)
    c.spike = replace(c.spike, poison_step=60)
    rep = spike_scenario(c)
    assert rep["guarded_wide_skips"] >= 1 and rep["skip_digests_unchanged"]
    assert rep["excursion"]["guarded"] < rep["excursion"]["unguarded"]


def test_spike_scenario_needs_poison():
    with pytest.raises(RejectedInputError):
        spike_scenario(ExperimentConfig())


# gradient check

def test_grad_check_passes_with_aux_losses():
    c = ExperimentConfig(model=GRAD_CHECK_MODEL)
    assert c.train.lambda_bal > 0 and c.train.lambda_z > 0
    rep = run_grad_check(c, n_instances=3)
    assert rep["pass"] and rep["failed_groups"] == []
    assert "input" in rep["groups"] and len(rep["groups"]) >= 8


def test_grad_check_corruption_names_group():
    c = ExperimentConfig(model=GRAD_CHECK_MODEL)
    name = sorted(Trainer(c).init_params())[0]
    rep = run_grad_check(c, n_instances=1, corrupt=name)
    assert not rep["pass"] and rep["failed_groups"] == [name]


def test_grad_check_rejects_large_model():
    with pytest.raises(RejectedInputError):
        run_grad_check(ExperimentConfig(), n_instances=1)


# config

def test_config_roundtrip_byte_stable():
    c = ExperimentConfig(seed=7)
    c.edit = replace(c.edit, corrupt={"1": [3, 10.0]})
    text = c.dumps()
    assert ExperimentConfig.loads(text).dumps() == text


def test_config_partial_file_defaults():
    c = ExperimentConfig.loads('{"seed": 3, "model": {"n_experts": 4}, "train": {"total_steps": 9}}')
    assert c.seed == 3 and c.model.n_experts == 4 and c.model.d_model == 16
    assert c.train.total_steps == 9 and c.train.max_lr == 1e-2


@pytest.mark.parametrize("text", ['{"sed": 1}', '{"train": {"steps": 1}}', '{"model": {"width": 1}}',
                                  '{"schema_version": 99}'])
def test_config_rejects(text):
    with pytest.raises(RejectedInputError):
        ExperimentConfig.loads(text)
