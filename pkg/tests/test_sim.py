import csv
import io

import pytest

from moetrain.edit import SyncPolicy
from moetrain.errors import RejectedInputError
from moetrain.numcore import RngStream
from moetrain.sim import (
    DEVICE_PRESETS,
    StepTimeModel,
    compare_cost,
    device,
    device_hours_for_tokens,
    estimate_cost,
    load_presets,
    simulate_edit,
    simulate_sync_baseline,
    speedup_ratio,
    straggler_sweep,
)


def _rng(seed=0):
    return RngStream(seed, "sim-time")


def test_deterministic_equal_times():
    tr = simulate_sync_baseline(4, StepTimeModel(2.0), 10, _rng())
    assert tr.total_time == 20.0 and tr.throughput == 0.5


def test_baseline_waits_for_slowest():
    models = [StepTimeModel(1.0), StepTimeModel(2.0)]
    tr = simulate_sync_baseline(2, models, 8, _rng())
    assert tr.throughput == 0.5
    idle = sum(e[2] - e[1] for e in tr.worker_events(0) if e[3] == "idle")
    assert idle == 8.0


def test_comm_time_adds_per_step():
    tr = simulate_sync_baseline(2, StepTimeModel(1.0), 5, _rng(), comm_time=0.5)
    assert tr.total_time == 7.5


@pytest.mark.parametrize("n,p,m", [(4, 0.1, 4.0), (8, 0.05, 3.0), (2, 0.5, 2.0)])
def test_baseline_matches_expected_max(n, p, m):
    # every step lasts t*m when any worker straggles, else t
    t = 1.0
    expected = t * (1 + (m - 1) * (1 - (1 - p) ** n))
    tr = simulate_sync_baseline(n, StepTimeModel(t, p, m), 20_000, _rng(n))
    assert tr.total_time / 20_000 == pytest.approx(expected, rel=0.03)


def test_edit_homogeneous_equal_steps():
    tr = simulate_edit(4, StepTimeModel(1.0), SyncPolicy("every_H_steps", H=4), 5, _rng())
    assert tr.local_steps == [20] * 4
    assert tr.total_time == 20.0 and tr.throughput == 1.0


def test_edit_time_threshold_slow_worker_half_steps():
    models = [StepTimeModel(1.0), StepTimeModel(1.0, slowdown=2.0)]
    tr = simulate_edit(2, models, SyncPolicy("time_threshold", tau=8.0), 10, _rng())
    assert tr.local_steps == [80, 40]


def test_edit_layerwise_merge_cost():
    tr = simulate_edit(1, StepTimeModel(1.0), SyncPolicy("every_H_steps", H=2), 3, _rng(),
                       layer_compute=[1.0, 1.0], layer_comm=[0.5, 2.0])
    # merge = 0.5 + max(1, 2) + 1 = 3.5 per round
    assert tr.total_time == 3 * (2 + 3.5)


@pytest.mark.parametrize("kind", ["sync", "edit"])
def test_trace_busy_plus_idle_equals_total(kind):
    model = StepTimeModel(1.0, 0.2, 3.0)
    if kind == "sync":
        tr = simulate_sync_baseline(3, model, 50, _rng(), comm_time=0.1)
    else:
        tr = simulate_edit(3, model, SyncPolicy("time_threshold", tau=5.0), 10, _rng(), comm_time=0.1)
    for w in range(3):
        ev = tr.worker_events(w)
        assert sum(e[2] - e[1] for e in ev) == pytest.approx(tr.total_time, rel=1e-12)
        assert all(a[2] <= b[1] + 1e-12 for a, b in zip(ev, ev[1:]))


def test_trace_csv_columns():
    tr = simulate_sync_baseline(2, StepTimeModel(1.0), 2, _rng())
    rows = list(csv.DictReader(io.StringIO(tr.to_csv())))
    assert list(rows[0]) == ["worker", "kind", "start", "end"]
    assert len(rows) == len(tr.events)


def test_simulation_reproducible():
    model = StepTimeModel(1.0, 0.3, 5.0)
    a = simulate_edit(4, model, SyncPolicy("time_threshold", tau=6.0), 20, _rng(9))
    b = simulate_edit(4, model, SyncPolicy("time_threshold", tau=6.0), 20, _rng(9))
    assert a.to_csv() == b.to_csv()


def test_speedup_fixture():
    assert abs(speedup_ratio(9.119e-2, 5.49e-2) - 66.1) <= 0.1


def test_speedup_zero_and_invalid():
    assert speedup_ratio(0.7, 0.7) == 0.0
    with pytest.raises(RejectedInputError):
        speedup_ratio(1.0, 0.0)


def test_sweep_monotone():
    sweep = straggler_sweep(8, StepTimeModel(1.0, 0.1), [1.0, 2.0, 4.0, 8.0, 16.0], seed=0,
                            tau=8.0, total_steps=400, total_rounds=50)
    assert sweep[0] == pytest.approx(0.0, abs=1e-9)
    assert all(a < b for a, b in zip(sweep, sweep[1:]))


def test_device_presets():
    assert {k: (d.peak_flops_T, d.memory_gb, d.cost_per_hour_rmb, d.supports_fp8)
            for k, d in DEVICE_PRESETS.items()} == {
        "A": (370, 64, 7.0, False),
        "B": (120, 96, 4.5, False),
        "C": (312, 80, 10.0, False),
        "D": (989, 80, 27.5, True),
        "E": (147, 96, 5.64, True),
    }


def test_preset_override_and_new_device():
    p = load_presets({"B": {"cost_per_hour_rmb": 4.0},
                      "X": {"peak_flops_T": 10, "memory_gb": 8, "cost_per_hour_rmb": 1.0,
                            "supports_fp8": False}})
    assert p["B"].cost_per_hour_rmb == 4.0 and p["B"].memory_gb == 96
    assert p["X"].peak_flops_T == 10
    assert DEVICE_PRESETS["B"].cost_per_hour_rmb == 4.5


def test_unknown_device():
    with pytest.raises(RejectedInputError):
        device("Z")


def test_estimate_cost_exact():
    assert estimate_cost(device("D"), 1000, 231) == 6.3525e6


def test_compare_cost_fixture():
    assert abs(compare_cost(6.35e6, 5.08e6) - 20.0) <= 0.1
    assert compare_cost((device("D"), 1000, 231), 5.08e6) == pytest.approx(20.03, abs=0.01)


def test_compare_cost_identity():
    assert compare_cost(5.0, 5.0) == 0.0


@pytest.mark.parametrize("args", [(device("A"), 0, 1), (device("A"), 1, -1)])
def test_estimate_cost_rejects(args):
    with pytest.raises(RejectedInputError):
        estimate_cost(*args)


def test_device_hours_scale_with_flops():
    ref = device_hours_for_tokens(1e9, device("D"), 1e-6)
    slow = device_hours_for_tokens(1e9, device("B"), 1e-6)
    assert ref == pytest.approx(1e3)
    assert slow == pytest.approx(1e3 * 989 / 120)


def test_step_model_validation():
    with pytest.raises(RejectedInputError):
        StepTimeModel(straggle_probability=1.5)
    with pytest.raises(RejectedInputError):
        StepTimeModel(slowdown=0.5)
