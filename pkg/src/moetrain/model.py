"""Student/teacher network: MoE block followed by a NormHead projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalInstabilityError, RejectedInputError
from .moe import (
    LAMBDA_BAL,
    LAMBDA_Z,
    MoEConfig,
    RouterState,
    moe_backward,
    moe_forward,
    normhead_backward,
    normhead_forward,
)
from .numcore import RngStream, logsumexp


def mse_loss(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    t = logits.shape[0]
    lse = logsumexp(logits)
    loss = float(np.mean(lse - logits[np.arange(t), labels]))
    p = np.exp(logits - lse[:, None])
    p[np.arange(t), labels] -= 1.0
    return loss, p / t


TASK_LOSSES = {"regression": mse_loss, "classification": cross_entropy}


@dataclass
class LossBreakdown:
    total: float
    task: float
    balance: float
    z: float
    report: object

    def to_dict(self) -> dict:
        return {"total": self.total, "task": self.task, "balance_loss": self.balance, "z_loss": self.z}


def predict(params: dict, x: np.ndarray, state: RouterState, rng: RngStream, config: MoEConfig):
    o_prime, report, cache, new_state = moe_forward(x, params, state, rng, config)
    logits = normhead_forward(o_prime, params["lm_head"])
    if not np.all(np.isfinite(logits)):
        raise NumericalInstabilityError("non-finite head output", layer="lm_head")
    return logits, o_prime, report, cache, new_state


def loss_and_grads(params: dict, x: np.ndarray, target: np.ndarray, state: RouterState,
                   rng: RngStream, config: MoEConfig, task: str = "regression",
                   lambda_bal: float = LAMBDA_BAL, lambda_z: float = LAMBDA_Z,
                   loss_scale: float = 1.0, need_grads: bool = True, with_input: bool = False,
                   poison_scale: float | None = None):
    """Forward and backward through block, head and auxiliary losses.

    Returns ``(LossBreakdown, grads, new_router_state)``; ``grads`` is None
    when ``need_grads`` is false. ``loss_scale`` multiplies the task loss.
    With ``with_input`` the input gradient is returned under key ``"input"``.

    ``poison_scale`` corrupts the batch for fault injection: regression
    targets are reflected through the prediction so the task gradient becomes
    ``-poison_scale`` times the clean one; classification scales the loss.
    """
    if task not in TASK_LOSSES:
        raise RejectedInputError(f"unknown task {task!r}")
    logits, o_prime, report, cache, new_state = predict(params, x, state, rng, config)
    if poison_scale is not None:
        if task == "regression":
            target = logits + poison_scale * (logits - target)
        else:
            loss_scale = loss_scale * poison_scale
    task_loss, dlogits = TASK_LOSSES[task](logits, target)
    task_loss *= loss_scale
    total = task_loss + lambda_bal * report.balance_loss + lambda_z * report.z_loss
    br = LossBreakdown(total, task_loss, report.balance_loss, report.z_loss, report)
    if not need_grads:
        return br, None, new_state
    dlogits = dlogits * loss_scale
    do, dw_lm = normhead_backward(o_prime, params["lm_head"], dlogits)
    g = moe_backward(cache, do, params, config, lambda_bal, lambda_z)
    g["lm_head"] = dw_lm
    grads = {k: g[k] for k in params}
    if with_input:
        grads["input"] = g["input"]
    return br, grads, new_state


def total_loss(params, x, target, state, rng_factory, config, task="regression",
               lambda_bal=LAMBDA_BAL, lambda_z=LAMBDA_Z) -> float:
    br, _, _ = loss_and_grads(params, x, target, state, rng_factory(), config, task,
                              lambda_bal, lambda_z, need_grads=False)
    return br.total
