import numpy as np
import pytest

from moetrain.errors import AnomalySignal, RejectedInputError
from moetrain.numcore import RngStream, global_norm
from moetrain.optim import (
    AdamWState,
    BatchSizeSchedule,
    LrSchedule,
    adamw_step,
    batch_size_at,
    clip_global_norm,
    inv_sqrt_lr,
    wsd_lr,
)


def _scalar(x):
    return {"w": np.array([x])}


def test_adamw_two_hand_steps():
    # reference values evaluated by hand in 40-digit decimal arithmetic
    p = _scalar(1.0)
    st = AdamWState.zeros_like(p, weight_decay=0.0)
    p, st = adamw_step(p, _scalar(0.5), st, 0.1)
    assert abs(p["w"][0] - 0.90000000199999996) < 1e-12
    assert st.m["w"][0] == pytest.approx(0.05, abs=1e-15)
    assert st.v["w"][0] == pytest.approx(0.0125, abs=1e-15)
    p, st = adamw_step(p, _scalar(-0.2), st, 0.1)
    assert abs(p["w"][0] - 0.86512034478737055) < 1e-12
    assert st.step == 2


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"a": RngStream(0, "init").normal((3, 2))}
    st = AdamWState.zeros_like(p, weight_decay=0.0)
    new, _ = adamw_step(p, {"a": np.zeros((3, 2))}, st, 0.01)
    np.testing.assert_array_equal(new["a"], p["a"])


def test_adamw_pure_decay():
    lr = 2.4e-4
    p = _scalar(3.0)
    st = AdamWState.zeros_like(p)
    assert st.weight_decay == 0.1
    for i in range(3):
        p, st = adamw_step(p, _scalar(0.0), st, lr)
    assert p["w"][0] == pytest.approx(3.0 * (1 - lr * 0.1) ** 3, rel=1e-15)


def test_adamw_does_not_mutate_inputs():
    p = _scalar(1.0)
    st = AdamWState.zeros_like(p)
    adamw_step(p, _scalar(1.0), st, 0.1)
    assert p["w"][0] == 1.0 and st.step == 0 and st.m["w"][0] == 0.0


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_adamw_nonfinite_grad_signals(bad):
    p = _scalar(1.0)
    with pytest.raises(AnomalySignal):
        adamw_step(p, _scalar(bad), AdamWState.zeros_like(p), 0.1)


def test_published_hyperparameters_are_defaults():
    st = AdamWState.zeros_like({})
    assert (st.beta1, st.beta2, st.eps, st.weight_decay) == (0.9, 0.95, 1e-8, 0.1)


@pytest.mark.parametrize("step,expected", [(0, 0.0), (1000, 1.2e-4), (2000, 2.4e-4), (5999, 2.4e-4),
                                           (6000, 1.2e-4), (9999, 1.2e-4)])
def test_wsd(step, expected):
    assert wsd_lr(step, 10_000) == pytest.approx(expected, rel=1e-15)


def test_wsd_negative_step():
    with pytest.raises(RejectedInputError):
        wsd_lr(-1, 100)


def test_inv_sqrt_endpoints():
    assert inv_sqrt_lr(0, 500) == 1.2e-4
    assert abs(inv_sqrt_lr(500, 500) - 1.2e-8) / 1.2e-8 < 1e-12


def test_inv_sqrt_monotone():
    lrs = [inv_sqrt_lr(s, 100) for s in range(101)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


def test_schedule_kinds():
    assert LrSchedule(kind="constant", max_lr=0.3).lr(77, 100) == 0.3
    assert LrSchedule(kind="inv_sqrt").lr(0, 10) == 1.2e-4
    with pytest.raises(RejectedInputError):
        LrSchedule(kind="cosine")


def test_clip_exact_scaling():
    g = {"a": np.array([2.0, 0.0])}
    out, norm = clip_global_norm(g, 1.0)
    assert norm == 2.0
    np.testing.assert_array_equal(out["a"], [1.0, 0.0])


def test_clip_below_threshold_unchanged():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_global_norm(g, 1.0)
    assert norm == 0.5
    np.testing.assert_array_equal(out["a"], g["a"])


@pytest.mark.parametrize("seed", range(5))
def test_clip_post_norm(seed):
    rng = RngStream(seed, "task")
    g = {"a": rng.normal((4, 3)) * (seed + 0.2), "b": rng.normal(5)}
    out, pre = clip_global_norm(g, 1.0)
    assert abs(global_norm(out.values()) - min(pre, 1.0)) < 1e-12


def test_clip_nonfinite():
    with pytest.raises(AnomalySignal):
        clip_global_norm({"a": np.array([np.inf])})


@pytest.mark.parametrize("step,expected", [(0, 2560), (999, 2560), (1000, 5120), (1999, 5120),
                                           (2000, 8960), (10**6, 8960)])
def test_batch_size_staircase(step, expected):
    assert batch_size_at(step) == expected


def test_batch_size_monotone_and_capped():
    sched = BatchSizeSchedule(3, 20, (5, 10, 15))
    sizes = [batch_size_at(s, sched) for s in range(30)]
    assert sizes == sorted(sizes) and max(sizes) == 20 and sizes[0] == 3


@pytest.mark.parametrize("kw", [dict(initial=0), dict(initial=10, maximum=5), dict(boundaries=(5, 3))])
def test_batch_schedule_validation(kw):
    with pytest.raises(RejectedInputError):
        BatchSizeSchedule(**kw)
