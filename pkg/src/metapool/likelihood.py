"""Hardy-Thompson likelihood, profile intervals and their higher-order corrections.

Three intervals share the same maximum likelihood fit of the normal
random-effects model with known within-study variances:

* ``ht_profile_ci``  profile likelihood ratio calibrated by chi-square(1)
* ``nb_ci``          the same statistic with a Bartlett-type correction
* ``gs_ci``          Skovgaard's modified signed likelihood root
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .classic import dl_fit
from .model import (
    BracketFailure,
    EstimationError,
    FitResult,
    MetaDataset,
    Method,
    NonConvergence,
    SingularMatrix,
)
from .statkit import chi_square_quantile, normal_quantile

LOG_2PI = math.log(2.0 * math.pi)

#: |signed root| below which the Skovgaard correction is not evaluated
NEAR_MLE_ZONE = 1e-4


class NearMleSingularity(EstimationError):
    """Modified root requested too close to the maximum likelihood estimate."""


@dataclass
class HtEstimate:
    theta_hat: float
    tau2_hat: float
    loglik_at_max: float
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def boundary(self) -> bool:
        return self.tau2_hat == 0.0


def ht_loglik(theta: float, tau2: float, data: MetaDataset) -> float:
    if tau2 < 0:
        raise ValueError("tau2 must be non-negative")
    c = tau2 + data.var
    r = data.y - theta
    return float(-0.5 * data.m * LOG_2PI - 0.5 * np.log(c).sum() - 0.5 * np.dot(r, r / c))


def ht_score(theta: float, tau2: float, data: MetaDataset) -> tuple[float, float]:
    """Gradient of the log-likelihood in (theta, tau2)."""
    w = 1.0 / (tau2 + data.var)
    r = data.y - theta
    return float(np.dot(r, w)), float(0.5 * (np.dot(r * r, w * w) - w.sum()))


def ht_hessian(theta: float, tau2: float, data: MetaDataset) -> np.ndarray:
    """Observed Hessian of the log-likelihood in (theta, tau2)."""
    w = 1.0 / (tau2 + data.var)
    r = data.y - theta
    w2 = w * w
    h11 = -w.sum()
    h12 = -np.dot(r, w2)
    h22 = (0.5 * w2 - r * r * w2 * w).sum()
    return np.array([[h11, h12], [h12, h22]])


def ht_expected_information(tau2: float, data: MetaDataset) -> np.ndarray:
    w = 1.0 / (tau2 + data.var)
    return np.array([[w.sum(), 0.0], [0.0, 0.5 * np.dot(w, w)]])


def ht_equation_residuals(theta: float, tau2: float, data: MetaDataset) -> tuple[float, float]:
    """Right-hand side minus left-hand side of the two likelihood equations."""
    w = 1.0 / (tau2 + data.var)
    w2 = w * w
    r = data.y - theta
    res_theta = float(np.dot(w, data.y) / w.sum()) - theta
    res_tau2 = float(np.dot(r * r - data.var, w2) / w2.sum()) - tau2
    return res_theta, res_tau2


def _tau2_update(r2: np.ndarray, var: np.ndarray, tau2: float) -> float:
    w = 1.0 / (tau2 + var)
    w2 = w * w
    return max(0.0, float(np.dot(r2 - var, w2) / w2.sum()))


def profile_tau2(theta: float, data: MetaDataset, start: float | None = None,
                 tol: float = 1e-12, max_iter: int = 500) -> float:
    """Maximiser over tau2 >= 0 of the log-likelihood at fixed theta.

    Returns 0 when the tau2 score is non-positive at zero; otherwise solves
    the tau2 likelihood equation by Newton steps safeguarded with bisection
    on the bracket [0, max_i (Y_i - theta)^2].
    """
    var = data.var
    r2 = (data.y - theta) ** 2
    w = 1.0 / var
    if float(np.dot(r2, w * w) - w.sum()) <= 0.0:
        return 0.0
    # each score term is negative once tau2 >= (Y_i - theta)^2
    lo, hi = 0.0, float(r2.max())
    t = 0.5 * hi if start is None or not (0.0 < start < hi) else float(start)
    for _ in range(max_iter):
        w = 1.0 / (t + var)
        w2 = w * w
        g = float(np.dot(r2, w2) - w.sum())
        dg = float(w2.sum() - 2.0 * np.dot(r2, w2 * w))
        if g > 0.0:
            lo = t
        else:
            hi = t
        t_new = t - g / dg if dg != 0.0 else 0.5 * (lo + hi)
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= tol * (1.0 + t) or hi - lo <= tol * (1.0 + t):
            return t_new
        t = t_new
    raise NonConvergence(f"profile tau2 did not converge at theta={theta!r}", last_iterate=t)


def _profile_loglik_tau2(tau2: float, data: MetaDataset) -> tuple[float, float]:
    w = 1.0 / (tau2 + data.var)
    theta = float(np.dot(w, data.y) / w.sum())
    return theta, ht_loglik(theta, tau2, data)


def ht_mle(data: MetaDataset, tol: float = 1e-10, max_iter: int = 10_000) -> HtEstimate:
    """Joint maximum likelihood estimate by iterating the two likelihood equations.

    Falls back to a bounded one-dimensional search over tau2 (theta profiled
    out in closed form) when the iteration stalls or oscillates.
    """
    y, var = data.y, data.var
    w = 1.0 / var
    theta = float(np.dot(w, y) / w.sum())
    tau2 = max(0.0, float(np.var(y, ddof=1) - np.mean(var)))
    ll = ht_loglik(theta, tau2, data)
    diagnostics: dict = {}
    for it in range(1, max_iter + 1):
        w = 1.0 / (tau2 + var)
        theta_new = float(np.dot(w, y) / w.sum())
        tau2_new = _tau2_update((y - theta_new) ** 2, var, tau2)
        ll_new = ht_loglik(theta_new, tau2_new, data)
        step = 1.0
        while ll_new < ll - 1e-12 * (1.0 + abs(ll)) and step > 1e-6:
            # damping: shrink the tau2 move until the likelihood does not drop
            step *= 0.5
            tau2_try = tau2 + step * (tau2_new - tau2)
            theta_new, ll_new = _profile_loglik_tau2(tau2_try, data)
            tau2_new = tau2_try
        done = abs(theta_new - theta) < tol * (1.0 + abs(theta)) and abs(tau2_new - tau2) < tol * (1.0 + tau2)
        theta, tau2, ll = theta_new, tau2_new, ll_new
        if done:
            return HtEstimate(theta, tau2, ll, True, it, diagnostics)
    diagnostics["fallback"] = "golden"
    diagnostics["last_iterate"] = (theta, tau2)
    return _ht_mle_golden(data, diagnostics, max_iter)


def _ht_mle_golden(data: MetaDataset, diagnostics: dict, iterations: int) -> HtEstimate:
    upper = 10.0 * float(np.var(data.y) + data.var.max()) + 1.0
    res = optimize.minimize_scalar(
        lambda t: -_profile_loglik_tau2(t, data)[1],
        bounds=(0.0, upper), method="bounded", options={"xatol": 1e-12},
    )
    tau2 = float(res.x)
    theta0, ll0 = _profile_loglik_tau2(0.0, data)
    theta, ll = _profile_loglik_tau2(tau2, data)
    if ll0 >= ll:
        tau2, theta, ll = 0.0, theta0, ll0
    if not res.success:
        raise NonConvergence("maximum likelihood search failed", last_iterate=(theta, tau2))
    return HtEstimate(theta, tau2, ll, True, iterations + int(res.nfev), diagnostics)


def _resolve_mle(data: MetaDataset, mle: HtEstimate | None) -> HtEstimate:
    return ht_mle(data) if mle is None else mle


def profile_lr_stat(theta: float, data: MetaDataset, mle: HtEstimate | None = None) -> float:
    mle = _resolve_mle(data, mle)
    t2 = profile_tau2(theta, data, start=mle.tau2_hat)
    return max(0.0, -2.0 * (ht_loglik(theta, t2, data) - mle.loglik_at_max))


def joint_region_stat(theta: float, tau2: float, data: MetaDataset, mle: HtEstimate | None = None) -> float:
    mle = _resolve_mle(data, mle)
    return max(0.0, -2.0 * (ht_loglik(theta, tau2, data) - mle.loglik_at_max))


def in_joint_region(theta: float, tau2: float, data: MetaDataset, alpha: float = 0.05,
                    mle: HtEstimate | None = None) -> bool:
    return joint_region_stat(theta, tau2, data, mle) < chi_square_quantile(1.0 - alpha, 2.0)


def nb_bartlett_c(tau2: float, data: MetaDataset) -> float:
    w = 1.0 / (data.var + tau2)
    w2 = w * w
    return float(np.dot(w2, w) / (w.sum() * w2.sum()))


def nb_lr_stat(theta: float, data: MetaDataset, mle: HtEstimate | None = None) -> float:
    """Bartlett-corrected profile likelihood ratio statistic."""
    mle = _resolve_mle(data, mle)
    t2 = profile_tau2(theta, data, start=mle.tau2_hat)
    t = max(0.0, -2.0 * (ht_loglik(theta, t2, data) - mle.loglik_at_max))
    return t / (1.0 + 2.0 * nb_bartlett_c(t2, data))


def gs_signed_root(theta: float, data: MetaDataset, mle: HtEstimate | None = None) -> float:
    """Signed root of the profile likelihood ratio (factor 2 included)."""
    mle = _resolve_mle(data, mle)
    t2 = profile_tau2(theta, data, start=mle.tau2_hat)
    gap = max(0.0, 2.0 * (mle.loglik_at_max - ht_loglik(theta, t2, data)))
    return math.copysign(math.sqrt(gap), mle.theta_hat - theta) if gap > 0 else 0.0


@dataclass
class SkovgaardTerms:
    """Ingredients of the modified signed root at one value of theta."""

    theta: float
    tau2_profile: float
    r: float
    u: float
    S: np.ndarray
    q: np.ndarray
    info_hat: np.ndarray
    hess_hat: np.ndarray
    nuisance_info: float
    fallbacks: tuple[str, ...] = ()

    @property
    def r_modified(self) -> float:
        return self.r + math.log(self.u / self.r) / self.r


def skovgaard_terms(theta: float, data: MetaDataset, mle: HtEstimate | None = None,
                    form: str = "skovgaard") -> SkovgaardTerms:
    """Assemble S, q, the information matrices and u-tilde at ``theta``.

    ``form="skovgaard"`` uses |J_hat|^(1/2) |I_hat|^(-1) and the observed
    nuisance information at the constrained fit, which makes u/r tend to 1
    at the MLE. ``form="printed"`` uses |I_hat|^(1/2) |J_hat|^(-1) and the
    expected nuisance information.
    """
    if form not in ("skovgaard", "printed"):
        raise ValueError(f"unknown form {form!r}")
    mle = _resolve_mle(data, mle)
    var, y = data.var, data.y
    th, t2h = mle.theta_hat, mle.tau2_hat
    t2 = profile_tau2(theta, data, start=t2h)
    gap = max(0.0, 2.0 * (mle.loglik_at_max - ht_loglik(theta, t2, data)))
    r = math.copysign(math.sqrt(gap), th - theta) if gap > 0 else 0.0

    wt = 1.0 / (var + t2)
    wt2 = wt * wt
    wh = 1.0 / (var + t2h)
    d = th - theta
    S = np.array([[wt.sum(), d * wt2.sum()], [0.0, 0.5 * wt2.sum()]])
    q = np.array([d * wt.sum(), -0.5 * (wh - wt).sum()])
    info_hat = ht_expected_information(t2h, data)
    hess_hat = ht_hessian(th, t2h, data)
    fallbacks = []

    det_S = S[0, 0] * S[1, 1]
    if abs(det_S) < 1e-12:
        raise SingularMatrix("|S(theta)| vanishes")
    det_i = float(np.linalg.det(info_hat))
    det_j = float(np.linalg.det(hess_hat))  # 2x2: det(H) == det(-H)
    if form == "skovgaard":
        if t2h == 0.0 or det_j <= 0.0:
            det_j = det_i
            fallbacks.append("expected_info_at_mle")
        nuis = float(np.dot((y - theta) ** 2, wt2 * wt) - 0.5 * wt2.sum())
        if t2 == 0.0 or nuis <= 0.0:
            nuis = 0.5 * float(wt2.sum())
            fallbacks.append("expected_nuisance_info")
        scale = math.sqrt(det_j) / det_i
    else:
        if abs(det_j) < 1e-12:
            raise SingularMatrix("|J| vanishes at the maximum likelihood estimate")
        nuis = 0.5 * float(wt2.sum())
        scale = math.sqrt(det_i) / abs(det_j)
    first = float(np.linalg.solve(S, q)[0])
    u = first * scale * det_S / math.sqrt(nuis)
    return SkovgaardTerms(theta, t2, r, u, S, q, info_hat, hess_hat, nuis, tuple(fallbacks))


def gs_modified_root(theta: float, data: MetaDataset, mle: HtEstimate | None = None,
                     form: str = "skovgaard") -> float:
    terms = skovgaard_terms(theta, data, mle, form)
    if abs(terms.r) < NEAR_MLE_ZONE:
        raise NearMleSingularity(f"|r| = {abs(terms.r):.3g} below {NEAR_MLE_ZONE}")
    if terms.u / terms.r <= 0.0:
        raise EstimationError("modified root undefined: u and r have opposite signs")
    return terms.r_modified


# -- interval search ---------------------------------------------------------

def _search_step(data: MetaDataset, theta_hat: float) -> tuple[float, float]:
    s_dl = math.sqrt(1.0 / np.sum(1.0 / (dl_fit(data).tau2_hat + data.var)))
    return max(s_dl, 1e-6 * (1.0 + abs(theta_hat))), 50.0 * s_dl


def _one_side(g: Callable[[float], float], theta_hat: float, direction: int,
              step: float, max_dist: float, diagnostics: dict, side: str) -> float:
    """Walk outward from ``theta_hat`` until ``g`` turns positive, then solve ``g = 0``.

    ``g`` is negative inside the confidence set.
    """
    inner = theta_hat
    k = 0
    while True:
        k += 1
        dist = k * step
        if dist > max_dist:
            raise BracketFailure(f"{side} limit not bracketed within {max_dist:.4g} of the estimate")
        outer = theta_hat + direction * dist
        g_out = g(outer)
        if g_out > 0.0:
            break
        inner = outer
    if g(inner) > 0.0:
        # sign pattern inconsistent with a monotone statistic
        diagnostics.setdefault("non_monotone", []).append(side)
        grid = np.linspace(inner, outer, 33)
        vals = [g(t) for t in grid]
        for a, b, va in zip(grid[:-1], grid[1:], vals[:-1]):
            if va <= 0.0 < g(b):
                inner, outer = a, b
        if g(inner) > 0.0:
            raise BracketFailure(f"{side} limit: no inside point found near the estimate")
    return float(optimize.brentq(g, min(inner, outer), max(inner, outer), xtol=1e-13, rtol=4 * np.finfo(float).eps))


def _interval(g_lower, g_upper, theta_hat, data, diagnostics):
    step, max_dist = _search_step(data, theta_hat)
    lo = _one_side(g_lower, theta_hat, -1, step, max_dist, diagnostics, "lower")
    hi = _one_side(g_upper, theta_hat, +1, step, max_dist, diagnostics, "upper")
    return lo, hi


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")


def _fit(method, mle, lo, hi, alpha, diagnostics, data):
    diagnostics.setdefault("tau2_boundary", mle.boundary)
    return FitResult(
        method=method, theta_hat=mle.theta_hat, ci_low=lo, ci_high=hi, alpha=alpha,
        tau2_hat=mle.tau2_hat, converged=mle.converged, iterations=mle.iterations,
        diagnostics=diagnostics,
    )


def ht_profile_ci(data: MetaDataset, alpha: float = 0.05, mle: HtEstimate | None = None) -> FitResult:
    _check_alpha(alpha)
    mle = _resolve_mle(data, mle)
    crit = chi_square_quantile(1.0 - alpha, 1.0)
    g = lambda t: profile_lr_stat(t, data, mle) - crit
    diagnostics: dict = {"critical_value": crit}
    lo, hi = _interval(g, g, mle.theta_hat, data, diagnostics)
    return _fit(Method.HT, mle, lo, hi, alpha, diagnostics, data)


def nb_ci(data: MetaDataset, alpha: float = 0.05, mle: HtEstimate | None = None) -> FitResult:
    _check_alpha(alpha)
    mle = _resolve_mle(data, mle)
    crit = chi_square_quantile(1.0 - alpha, 1.0)
    g = lambda t: nb_lr_stat(t, data, mle) - crit
    diagnostics: dict = {"critical_value": crit}
    lo, hi = _interval(g, g, mle.theta_hat, data, diagnostics)
    return _fit(Method.NB, mle, lo, hi, alpha, diagnostics, data)


def gs_ci(data: MetaDataset, alpha: float = 0.05, mle: HtEstimate | None = None,
          form: str = "skovgaard") -> FitResult:
    _check_alpha(alpha)
    mle = _resolve_mle(data, mle)
    z = normal_quantile(1.0 - alpha / 2.0)
    diagnostics: dict = {"critical_value": z, "form": form}

    def r_gs(t):
        try:
            return gs_modified_root(t, data, mle, form)
        except NearMleSingularity:
            return None

    def g_lower(t):
        v = r_gs(t)
        return -z if v is None else v - z

    def g_upper(t):
        v = r_gs(t)
        return -z if v is None else -v - z

    lo, hi = _interval(g_lower, g_upper, mle.theta_hat, data, diagnostics)
    return _fit(Method.GS, mle, lo, hi, alpha, diagnostics, data)
