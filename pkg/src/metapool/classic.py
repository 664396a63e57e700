"""DerSimonian-Laird moment estimator with a t-based interval."""
from __future__ import annotations

import math

import numpy as np

from .model import DegenerateWeights, FitResult, MetaDataset, Method
from .statkit import normal_quantile, student_t_quantile


def cochran_q(data: MetaDataset) -> tuple[float, float]:
    """Return ``(Q, y_bar)`` with inverse-variance weights 1/S_i^2."""
    w = 1.0 / data.var
    y_bar = float(np.dot(w, data.y) / w.sum())
    q = float(np.dot(w, (data.y - y_bar) ** 2))
    return q, y_bar


def dl_tau2(data: MetaDataset) -> float:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w = 1.0 / data.var
        sw = w.sum()
        denom = float(np.dot(w, sw - w) / sw)
    if not denom > 0.0:
        raise DegenerateWeights("moment estimator denominator vanishes; weights concentrate on one study")
    q, _ = cochran_q(data)
    return max(0.0, (q - (data.m - 1)) / denom)


def dl_fit(data: MetaDataset, alpha: float = 0.05, normal: bool = False) -> FitResult:
    """DerSimonian-Laird pooled estimate and interval.

    The interval uses the t quantile with m - 1 df. ``normal=True`` swaps in
    the standard normal quantile for comparison with common software.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    tau2 = dl_tau2(data)
    w = 1.0 / (tau2 + data.var)
    theta = float(np.dot(w, data.y) / w.sum())
    se = math.sqrt(1.0 / w.sum())
    if normal:
        crit = normal_quantile(1.0 - alpha / 2.0)
    else:
        crit = student_t_quantile(1.0 - alpha / 2.0, data.m - 1)
    return FitResult(
        method=Method.DL,
        theta_hat=theta,
        ci_low=theta - crit * se,
        ci_high=theta + crit * se,
        alpha=alpha,
        tau2_hat=tau2,
        diagnostics={"se": se, "critical_value": crit, "quantile": "normal" if normal else "t"},
    )
