"""Power-law and saturating loss-curve fits against compute budget."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .errors import FitFailureError, RangeError, RejectedInputError

METRICS = ("batch_size", "lr", "loss")


@dataclass(frozen=True)
class RunRecord:
    compute_flops: float
    metric: str
    value: float
    arch: str = "moe"
    sparsity: float = 1.0

    def __post_init__(self):
        if self.compute_flops <= 0 or self.value <= 0:
            raise RejectedInputError("compute and observed values must be positive")
        if self.metric not in METRICS:
            raise RejectedInputError(f"unknown metric {self.metric!r}")
        if not 0 < self.sparsity <= 1:
            raise RejectedInputError("sparsity must lie in (0, 1]")

    def budget(self, accounting: str = "activated") -> float:
        """Compute budget; ``total`` accounting charges MoE runs for all parameters."""
        if accounting == "activated":
            return self.compute_flops
        if accounting == "total":
            return self.compute_flops / self.sparsity
        raise RejectedInputError(f"unknown FLOPs accounting {accounting!r}")


@dataclass(frozen=True)
class PowerLawFit:
    a: float
    b: float
    residual: float

    def __call__(self, c):
        return self.a * np.power(c, self.b)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "residual_rms_log": self.residual}


@dataclass(frozen=True)
class LossCurveFit:
    l0: float
    a: float
    b: float
    c_min: float
    c_max: float
    residual: float = 0.0

    def __call__(self, c):
        return self.l0 + self.a * np.power(c, self.b)

    def inverse(self, loss: float) -> float:
        """Closed-form compute for ``loss`` (used as a cross-check)."""
        return ((loss - self.l0) / self.a) ** (1.0 / self.b)

    def to_dict(self) -> dict:
        return {"L0": self.l0, "a": self.a, "b": self.b, "c_min": self.c_min, "c_max": self.c_max,
                "residual_rms": self.residual}


def _xy(records, y=None):
    if y is not None:
        return np.asarray(records, dtype=np.float64), np.asarray(y, dtype=np.float64)
    c = np.array([r.compute_flops for r in records], dtype=np.float64)
    v = np.array([r.value for r in records], dtype=np.float64)
    return c, v


def fit_power_law(records, y=None) -> PowerLawFit:
    """Least squares of ``log y = log a + b log C``.

    Accepts a list of :class:`RunRecord` or two arrays ``(C, y)``.
    """
    c, v = _xy(records, y)
    if c.size < 3:
        raise RejectedInputError("need at least 3 points")
    if np.any(c <= 0) or np.any(v <= 0):
        raise RejectedInputError("power-law fit needs positive values")
    if np.unique(c).size < 3:
        raise RejectedInputError("need at least 3 distinct compute budgets")
    x = np.log(c)
    ly = np.log(v)
    xm = x.mean()
    design = np.column_stack([np.ones_like(x), x - xm])
    coef, *_ = np.linalg.lstsq(design, ly, rcond=None)
    b = float(coef[1])
    log_a = float(coef[0] - b * xm)
    resid = ly - (log_a + b * x)
    return PowerLawFit(math.exp(log_a), b, float(np.sqrt(np.mean(resid ** 2))))


_B_GRID = -np.geomspace(1e-3, 3.0, 80)


def _vp_solve(z, loss, b):
    """Linear least squares for (L0, A) at fixed exponent; ``z = log(C / C_ref)``."""
    x = np.exp(b * z)
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, loss, rcond=None)
    r = loss - design @ coef
    return float(coef[0]), float(coef[1]), float(r @ r)


def fit_loss_curve(records, y=None) -> LossCurveFit:
    """Fit ``L(C) = L0 + a * C**b`` with ``b < 0``.

    The exponent is scanned on a fixed grid with ``L0`` and ``a`` solved
    linearly at each grid point, the best point is refined by bounded scalar
    search, then all three parameters are polished jointly.
    """
    c, loss = _xy(records, y)
    if c.size < 4:
        raise RejectedInputError("need at least 4 points")
    if np.any(c <= 0):
        raise RejectedInputError("compute budgets must be positive")
    if math.log10(c.max() / c.min()) < 2.0:
        raise RejectedInputError("compute budgets must span at least 2 decades")
    diag = {"n": int(c.size), "loss_range": float(loss.max() - loss.min())}
    if loss.max() - loss.min() <= 1e-12 * max(1.0, abs(float(loss.mean()))):
        raise FitFailureError("loss is constant; no decreasing power law identifiable", diag)

    z = np.log(c) - float(np.mean(np.log(c)))
    scan = [(_vp_solve(z, loss, b), b) for b in _B_GRID]
    valid = [(sse, b, i) for i, ((l0, amp, sse), b) in enumerate(scan) if amp > 0]
    if not valid:
        raise FitFailureError("no decreasing fit found on the exponent grid", diag)
    _, _, i = min(valid)
    lo = _B_GRID[min(i + 1, len(_B_GRID) - 1)]
    hi = _B_GRID[max(i - 1, 0)]
    res = minimize_scalar(lambda b: _vp_solve(z, loss, b)[2], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    b0 = float(res.x)
    l00, amp0, _ = _vp_solve(z, loss, b0)
    if amp0 <= 0:
        raise FitFailureError("refined fit is not decreasing", diag | {"b": b0})

    def resid(theta):
        l0, log_amp, b = theta
        return l0 + np.exp(log_amp + b * z) - loss

    sol = least_squares(resid, [l00, math.log(amp0), b0], method="lm", xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, max_nfev=2000)
    l0, log_amp, b = (float(v) for v in sol.x)
    if not sol.success or not b < 0:
        raise FitFailureError("joint refinement did not converge", diag | {"status": int(sol.status)})
    # back to the unscaled coefficient: A * (C/C_ref)^b = a * C^b
    log_c_ref = float(np.mean(np.log(c)))
    a = math.exp(log_amp - b * log_c_ref)
    rms = float(np.sqrt(np.mean(resid(sol.x) ** 2)))
    return LossCurveFit(l0, a, b, float(c.min()), float(c.max()), rms)


def invert_loss_curve(fit: LossCurveFit, target: float, rel_tol: float = 1e-10) -> float:
    """Compute budget at which ``fit`` reaches ``target``, by bisection in log C."""
    if not target > fit.l0:
        raise RangeError(f"target loss {target} is not above the asymptote {fit.l0}")
    lo, hi = math.log(fit.c_min), math.log(fit.c_max)
    while fit(math.exp(lo)) < target:
        lo -= 10.0
        if lo < -2000:
            raise RangeError("target loss above the fit's reachable range")
    while fit(math.exp(hi)) > target:
        hi += 10.0
        if hi > 2000:
            raise RangeError("target loss below the fit's reachable range")
    # a log-space gap of rel_tol bounds the relative error in C
    while hi - lo > rel_tol * 1e-2:
        mid = 0.5 * (lo + hi)
        if fit(math.exp(mid)) > target:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def efficiency_lever(moe_fit: LossCurveFit, dense_fit: LossCurveFit, c: float) -> float:
    """Dense compute needed to match the MoE loss at budget ``c``, divided by ``c``."""
    if c <= 0:
        raise RejectedInputError("compute budget must be positive")
    target = float(moe_fit(c))
    return invert_loss_curve(dense_fit, target) / c


def read_records_csv(path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(RunRecord(float(row["compute_flops"]), row["metric"], float(row["value"]),
                                 row.get("arch") or "moe", float(row.get("sparsity") or 1.0)))
    return out


def synthetic_records(rng, noise: float = 0.05, n_points: int = 8) -> list[RunRecord]:
    """Noisy power-law hyper-parameter records and MoE/dense loss curves."""
    budgets = np.geomspace(1e18, 6e20, n_points)
    recs = []
    for c in budgets:
        recs.append(RunRecord(float(c), "batch_size", float(0.29 * c ** 0.33 * math.exp(noise * rng.normal(())[()])), "moe", 0.1))
        recs.append(RunRecord(float(c), "lr", float(0.3 * c ** -0.125 * math.exp(noise * rng.normal(())[()])), "moe", 0.1))
    loss_budgets = np.geomspace(1e18, 3e22, n_points)
    for c in loss_budgets:
        recs.append(RunRecord(float(c), "loss", float(1.5 + 40 * c ** -0.1 + 0.002 * rng.normal(())[()]), "moe", 0.1))
        recs.append(RunRecord(float(c), "loss", float(1.5 + 40 * (c / 3.0) ** -0.1 + 0.002 * rng.normal(())[()]), "dense", 1.0))
    return recs


def fit_report(records: list[RunRecord], accounting: str = "activated",
               lever_budgets=(1e21, 1e22, 1e23, 1e24)) -> dict:
    report: dict = {"accounting": accounting, "power_laws": {}, "loss_curves": {}, "lever": {}}
    groups: dict = {}
    for r in records:
        groups.setdefault((r.arch, r.metric), []).append(r)
    for (arch, metric), recs in sorted(groups.items()):
        c = [r.budget(accounting) for r in recs]
        v = [r.value for r in recs]
        key = f"{arch}.{metric}"
        if metric == "loss":
            report["loss_curves"][key] = fit_loss_curve(c, v).to_dict()
        else:
            report["power_laws"][key] = fit_power_law(c, v).to_dict()
    curves = report["loss_curves"]
    if "moe.loss" in curves and "dense.loss" in curves:
        mf = LossCurveFit(**_curve_args(curves["moe.loss"]))
        df = LossCurveFit(**_curve_args(curves["dense.loss"]))
        for c in lever_budgets:
            try:
                report["lever"][f"{c:.0e}"] = efficiency_lever(mf, df, c)
            except RangeError as e:
                report["lever"][f"{c:.0e}"] = {"error": str(e)}
    return report


def _curve_args(d: dict) -> dict:
    return {"l0": d["L0"], "a": d["a"], "b": d["b"], "c_min": d["c_min"], "c_max": d["c_max"],
            "residual": d["residual_rms"]}
