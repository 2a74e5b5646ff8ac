"""Fine-grained MoE feed-forward block with analytic gradients.

Token flow for a batch ``h`` of shape ``(T, d)``::

    s      = h @ W_router                          raw router logits
    s_hat  = a*s + (1-a)*(mu + sigma*eps)          stochastic warmup, a = min(i/W, 1)
    p      = softmax(s_hat)
    o_t    = sum_{i in topk(p_t)} p_ti * E_i(h_t)  no renormalization, no dropping
    o'_t   = o_t + E_share(h_t)

Experts are gated-linear units with a SiLU gate: ``E(x) = (silu(x Wg) * (x Wu)) Wd``.
The running statistics ``mu``/``sigma`` are treated as constants for differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalInstabilityError, RejectedInputError, RejectedParameterError, StaleCacheError
from .numcore import RngStream, digest, logsumexp, softmax, topk_rows

LAMBDA_BAL = 0.015
LAMBDA_Z = 1e-4


@dataclass(frozen=True)
class MoEConfig:
    d_model: int = 16
    n_experts: int = 8
    k_top: int = 2
    d_expert_hidden: int = 8
    shared_expert: bool = True
    d_shared_hidden: int = 16
    vocab: int = 16
    warmup_horizon: int = 0
    stats_decay: float = 0.99

    def __post_init__(self):
        for name in ("d_model", "n_experts", "k_top", "d_expert_hidden", "vocab"):
            if getattr(self, name) < 1:
                raise RejectedInputError(f"{name} must be positive")
        if not 1 <= self.k_top <= self.n_experts:
            raise RejectedInputError("k_top must lie in [1, n_experts]")
        if self.shared_expert and self.d_shared_hidden < 1:
            raise RejectedInputError("d_shared_hidden must be positive with a shared expert")
        if self.warmup_horizon < 0:
            raise RejectedInputError("warmup_horizon must be >= 0")

    @classmethod
    def fine_grained(cls, granularity: int, n_base: int, d_base: int, **kw) -> "MoEConfig":
        """``granularity`` times more experts, each ``granularity`` times narrower."""
        if d_base % granularity:
            raise RejectedInputError("d_base must be divisible by the granularity factor")
        return cls(n_experts=n_base * granularity, d_expert_hidden=d_base // granularity, **kw)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "MoEConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def routed_param_count(config: MoEConfig) -> int:
    return config.n_experts * 3 * config.d_model * config.d_expert_hidden


@dataclass(frozen=True)
class RouterState:
    mu_s: float = 0.0
    sigma_s: float = 0.0
    warmup_horizon: int = 0
    global_step: int = 0
    initialized: bool = False

    def __post_init__(self):
        if self.sigma_s < 0:
            raise RejectedInputError("sigma_s must be >= 0")

    @property
    def alpha(self) -> float:
        return warmup_alpha(self.global_step, self.warmup_horizon)

    @property
    def in_warmup(self) -> bool:
        return self.warmup_horizon > 0 and self.global_step <= self.warmup_horizon

    def to_dict(self) -> dict:
        return {
            "mu_s": self.mu_s,
            "sigma_s": self.sigma_s,
            "warmup_horizon": self.warmup_horizon,
            "global_step": self.global_step,
            "initialized": self.initialized,
        }


def warmup_alpha(step: int, horizon: int) -> float:
    if step < 0:
        raise RejectedInputError("global step must be >= 0")
    if horizon <= 0:
        return 1.0
    return min(step / horizon, 1.0)


PARAM_ORDER = ("router", "expert_gate", "expert_up", "expert_down",
               "shared_gate", "shared_up", "shared_down", "lm_head")


def init_params(config: MoEConfig, rng: RngStream) -> dict[str, np.ndarray]:
    d, n, he = config.d_model, config.n_experts, config.d_expert_hidden
    p = {
        "router": rng.normal((d, n)) / np.sqrt(d),
        "expert_gate": rng.normal((n, d, he)) / np.sqrt(d),
        "expert_up": rng.normal((n, d, he)) / np.sqrt(d),
        "expert_down": rng.normal((n, he, d)) / np.sqrt(he),
    }
    if config.shared_expert:
        hs = config.d_shared_hidden
        p["shared_gate"] = rng.normal((d, hs)) / np.sqrt(d)
        p["shared_up"] = rng.normal((d, hs)) / np.sqrt(d)
        p["shared_down"] = rng.normal((hs, d)) / np.sqrt(hs)
    p["lm_head"] = rng.normal((config.vocab, d))
    return p


def check_params(params: dict, config: MoEConfig) -> None:
    d, n, he, hs = config.d_model, config.n_experts, config.d_expert_hidden, config.d_shared_hidden
    want = {
        "router": (d, n),
        "expert_gate": (n, d, he),
        "expert_up": (n, d, he),
        "expert_down": (n, he, d),
        "lm_head": (config.vocab, d),
    }
    if config.shared_expert:
        want.update(shared_gate=(d, hs), shared_up=(d, hs), shared_down=(hs, d))
    for name, shape in want.items():
        if name not in params:
            raise RejectedParameterError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise RejectedParameterError(f"{name} has shape {params[name].shape}, expected {shape}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _glu_forward(x, wg, wu, wd):
    a = x @ wg
    b = x @ wu
    sa = _sigmoid(a)
    act = a * sa
    u = act * b
    return u @ wd, (x, a, b, sa, act, u)


def _glu_backward(dy, wg, wu, wd, saved):
    x, a, b, sa, act, u = saved
    dwd = u.T @ dy
    du = dy @ wd.T
    db = du * act
    da = du * b * (sa * (1.0 + a * (1.0 - sa)))
    dwg = x.T @ da
    dwu = x.T @ db
    dx = da @ wg.T + db @ wu.T
    return dx, dwg, dwu, dwd


# --------------------------------------------------------------------- routing

@dataclass
class RouteResult:
    gates: np.ndarray         # (T, k) softmax values at the selected experts
    indices: np.ndarray       # (T, k) expert ids, best first
    raw_logits: np.ndarray    # (T, N) s_t
    mixed_logits: np.ndarray  # (T, N) s_hat_t
    probs: np.ndarray         # (T, N) p_t
    alpha: float
    state: RouterState        # state after this batch's statistics update


def route(h: np.ndarray, w_router: np.ndarray, state: RouterState, rng: RngStream,
          k_top: int, stats_decay: float = 0.99) -> RouteResult:
    """Top-k routing with stochastic warmup.

    During warmup (``0 < W`` and ``step <= W``) the batch's logit mean and
    standard deviation are folded into the running statistics with an EMA;
    the first warmup batch seeds them directly. The noise ``eps`` is drawn
    for every call, so the stream advances identically whatever ``alpha`` is.
    """
    if state.global_step < 0:
        raise RejectedInputError("global step must be >= 0")
    s = h @ w_router
    t, n = s.shape
    eps = rng.normal((t, n))
    alpha = state.alpha

    new_state = state
    if state.in_warmup:
        bm, bs = float(s.mean()), float(s.std())
        if not state.initialized:
            state = replace(state, mu_s=bm, sigma_s=bs, initialized=True)
            new_state = state
        else:
            new_state = replace(
                state,
                mu_s=stats_decay * state.mu_s + (1 - stats_decay) * bm,
                sigma_s=stats_decay * state.sigma_s + (1 - stats_decay) * bs,
            )

    if alpha >= 1.0:
        s_hat = s.copy()
    else:
        s_hat = alpha * s + (1.0 - alpha) * (state.mu_s + state.sigma_s * eps)
    if not np.all(np.isfinite(s_hat)):
        raise NumericalInstabilityError("non-finite router logits", layer="router")
    p = softmax(s_hat)
    idx = topk_rows(p, k_top)
    return RouteResult(np.take_along_axis(p, idx, axis=1), idx, s, s_hat, p, alpha, new_state)


# ----------------------------------------------------------------- aux losses

def expert_counts(indices: np.ndarray, n_experts: int) -> np.ndarray:
    return np.bincount(np.asarray(indices).reshape(-1), minlength=n_experts).astype(np.float64)


def balance_loss(probs: np.ndarray, indices: np.ndarray) -> float:
    """``N * sum_i f_i * P_i``; equals 1 under perfectly uniform routing."""
    t, n = probs.shape
    k = indices.shape[1]
    f = expert_counts(indices, n) / (t * k)
    pm = probs.mean(axis=0)
    return float(n * np.dot(f, pm))


def z_loss(logits: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise RejectedInputError("z_loss of non-finite logits")
    return float(np.mean(logsumexp(logits) ** 2))


@dataclass
class AuxLossReport:
    balance_loss: float
    z_loss: float
    expert_load: np.ndarray
    mean_gate: np.ndarray

    def to_dict(self) -> dict:
        return {
            "balance_loss": self.balance_loss,
            "z_loss": self.z_loss,
            "expert_load": self.expert_load.tolist(),
            "mean_gate": self.mean_gate.tolist(),
        }


def expert_load_stats(selections) -> dict:
    """Routing fractions and balance diagnostics over a window of selections.

    ``selections`` is an iterable of integer index arrays (any shape) plus the
    expert count as attribute ``n_experts`` or, more commonly, a tuple
    ``(list_of_index_arrays, n_experts)``.
    """
    arrays, n = selections
    arrays = [np.asarray(a).reshape(-1) for a in arrays]
    if not arrays or sum(a.size for a in arrays) == 0:
        raise RejectedInputError("selection window is empty")
    counts = expert_counts(np.concatenate(arrays), n)
    load = counts / counts.sum()
    nz = load[load > 0]
    entropy = float(-np.sum(nz * np.log(nz)))
    ratio = float(load.max() / load.min()) if load.min() > 0 else float("inf")
    return {"load": load, "max_min_ratio": ratio, "entropy": entropy}


# -------------------------------------------------------------------- NormHead

def normhead_forward(h: np.ndarray, w_lm: np.ndarray) -> np.ndarray:
    """Logits against row-normalized head weights."""
    norms = np.linalg.norm(w_lm, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise RejectedParameterError("lm_head has a zero-norm or non-finite row")
    return h @ (w_lm / norms[:, None]).T


def normhead_backward(h: np.ndarray, w_lm: np.ndarray, dlogits: np.ndarray):
    norms = np.linalg.norm(w_lm, axis=1)
    w_hat = w_lm / norms[:, None]
    dh = dlogits @ w_hat
    dw_hat = dlogits.T @ h
    radial = np.sum(w_hat * dw_hat, axis=1, keepdims=True)
    dw = (dw_hat - w_hat * radial) / norms[:, None]
    return dh, dw


# ------------------------------------------------------------- forward/backward

@dataclass
class MoECache:
    h: np.ndarray
    route: RouteResult
    expert_saved: dict
    expert_out: dict
    shared_saved: tuple | None
    o: np.ndarray
    fingerprint: str


def _moe_fingerprint(params) -> str:
    return digest({k: params[k] for k in PARAM_ORDER if k in params and k != "lm_head"})


def moe_forward(h: np.ndarray, params: dict, state: RouterState, rng: RngStream,
                config: MoEConfig):
    """Returns ``(o_prime, report, cache, new_state)``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != config.d_model:
        raise RejectedInputError(f"input shape {h.shape} incompatible with d_model={config.d_model}")
    r = route(h, params["router"], state, rng, config.k_top, config.stats_decay)
    t = h.shape[0]
    o = np.zeros_like(h)
    saved, outs = {}, {}
    for e in range(config.n_experts):
        rows, slots = np.nonzero(r.indices == e)
        if rows.size == 0:
            continue
        y, sv = _glu_forward(h[rows], params["expert_gate"][e], params["expert_up"][e],
                             params["expert_down"][e])
        if not np.all(np.isfinite(y)):
            raise NumericalInstabilityError(f"non-finite output of expert {e}", layer=f"expert[{e}]")
        # rows are unique per expert: each token selects an expert at most once
        o[rows] += r.gates[rows, slots][:, None] * y
        saved[e] = (rows, slots, sv)
        outs[e] = y
    shared_saved = None
    o_prime = o
    if config.shared_expert:
        ys, shared_saved = _glu_forward(h, params["shared_gate"], params["shared_up"],
                                        params["shared_down"])
        if not np.all(np.isfinite(ys)):
            raise NumericalInstabilityError("non-finite output of shared expert", layer="shared")
        o_prime = o + ys

    counts = expert_counts(r.indices, config.n_experts)
    report = AuxLossReport(
        balance_loss=balance_loss(r.probs, r.indices),
        z_loss=z_loss(r.mixed_logits),
        expert_load=counts / (t * config.k_top),
        mean_gate=r.probs.mean(axis=0),
    )
    cache = MoECache(h, r, saved, outs, shared_saved, o, _moe_fingerprint(params))
    return o_prime, report, cache, r.state


def moe_backward(cache: MoECache, d_out: np.ndarray, params: dict, config: MoEConfig,
                 lambda_bal: float = LAMBDA_BAL, lambda_z: float = LAMBDA_Z):
    """Gradients of ``task + lambda_bal*L_bal + lambda_z*L_z``.

    ``d_out`` is the task-loss gradient w.r.t. the block output ``o'``.
    Returns a dict with one entry per MoE parameter plus ``"input"``.
    """
    if cache.fingerprint != _moe_fingerprint(params):
        raise StaleCacheError("cache does not match the given parameters")
    r = cache.route
    h = cache.h
    t, n = r.probs.shape
    k = r.indices.shape[1]
    grads = {
        "expert_gate": np.zeros_like(params["expert_gate"]),
        "expert_up": np.zeros_like(params["expert_up"]),
        "expert_down": np.zeros_like(params["expert_down"]),
    }
    dh = np.zeros_like(h)
    dgates = np.zeros_like(r.gates)
    for e, (rows, slots, sv) in cache.expert_saved.items():
        y = cache.expert_out[e]
        g = r.gates[rows, slots][:, None]
        dgates[rows, slots] = np.sum(d_out[rows] * y, axis=1)
        dx, dwg, dwu, dwd = _glu_backward(g * d_out[rows], params["expert_gate"][e],
                                          params["expert_up"][e], params["expert_down"][e], sv)
        grads["expert_gate"][e] = dwg
        grads["expert_up"][e] = dwu
        grads["expert_down"][e] = dwd
        np.add.at(dh, rows, dx)

    if config.shared_expert:
        dx, dwg, dwu, dwd = _glu_backward(d_out, params["shared_gate"], params["shared_up"],
                                          params["shared_down"], cache.shared_saved)
        grads["shared_gate"], grads["shared_up"], grads["shared_down"] = dwg, dwu, dwd
        dh += dx

    dp = np.zeros_like(r.probs)
    np.put_along_axis(dp, r.indices, dgates, axis=1)
    if lambda_bal:
        f = expert_counts(r.indices, n) / (t * k)
        dp += lambda_bal * n * f[None, :] / t
    p = r.probs
    ds_hat = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    if lambda_z:
        lse = logsumexp(r.mixed_logits)
        ds_hat += lambda_z * (2.0 / t) * lse[:, None] * p
    ds = r.alpha * ds_hat
    grads["router"] = h.T @ ds
    dh += ds @ params["router"].T
    grads["input"] = dh
    return grads


def aux_total(report: AuxLossReport, lambda_bal: float = LAMBDA_BAL,
              lambda_z: float = LAMBDA_Z) -> float:
    return lambda_bal * report.balance_loss + lambda_z * report.z_loss
