"""Bivariate normal / chi-square likelihood for (Y_i, S_i^2).

Within-study variances are modelled as sigma2 * eta_i, and the observed
S_i^2 contribute through the chi-square density of df_i S_i^2 / (sigma2 eta_i).
The study random effect is integrated out analytically, leaving a
N(theta, tau2 + sigma2 eta_i) marginal for Y_i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import optimize, special

from .classic import dl_fit
from .model import EstimationError, FitResult, MetaDataset, Method, NonConvergence
from .statkit import student_t_quantile

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


class HessianNotPD(EstimationError):
    pass


class EtaKind(str, Enum):
    INVERSE_DF = "inverse_df"
    INVERSE_N_MINUS_3 = "inverse_n_minus_3"
    TWO_GROUP = "two_group"
    CUSTOM = "custom"


@dataclass(frozen=True)
class EtaRule:
    """How the known variance multipliers eta_i are obtained.

    Only ``inverse_df`` is computed from the dataset; the other kinds carry
    precomputed ``values`` (from sample sizes the triplet does not hold).
    """

    kind: EtaKind = EtaKind.INVERSE_DF
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EtaKind(self.kind))
        if self.kind is not EtaKind.INVERSE_DF and self.values is None:
            raise ValueError(f"eta rule {self.kind.value!r} needs explicit per-study values")
        if self.values is not None and any(not (v > 0) for v in self.values):
            raise ValueError("eta values must be positive")

    @classmethod
    def from_sample_sizes(cls, n0, n1=None, kind: str = "two_group") -> "EtaRule":
        kind = EtaKind(kind)
        if kind is EtaKind.TWO_GROUP:
            vals = tuple(1.0 / a + 1.0 / b for a, b in zip(n0, n1))
        elif kind is EtaKind.INVERSE_N_MINUS_3:
            vals = tuple(1.0 / (n - 3.0) for n in n0)
        else:
            raise ValueError(f"cannot derive {kind.value!r} from sample sizes")
        return cls(kind, vals)

    def resolve(self, data: MetaDataset) -> np.ndarray:
        if self.kind is EtaKind.INVERSE_DF:
            return 1.0 / data.df
        eta = np.asarray(self.values, dtype=float)
        if eta.shape != (data.m,):
            raise ValueError(f"eta has {eta.size} values for {data.m} studies")
        return eta


INVERSE_DF = EtaRule()


@dataclass
class BdEstimate:
    theta_hat: float
    tau2_hat: float
    sigma2_hat: float
    se_theta: float
    loglik_at_max: float
    converged: bool
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)


class _Problem:
    """Log-likelihood pieces with data-only terms precomputed."""

    def __init__(self, data: MetaDataset, eta: EtaRule, jacobian: bool):
        self.y = data.y
        self.var = data.var
        self.df = data.df
        self.eta = eta.resolve(data)
        self.jacobian = jacobian
        self.dfs2 = data.df * data.var
        half = 0.5 * data.df
        # constant part of the chi-square log density
        self.const = float(
            -0.5 * data.m * LOG_2PI - np.sum(half * LOG_2 + special.gammaln(half))
        )
        if jacobian:
            self.const += float(np.log(data.df).sum())

    def loglik(self, theta: float, tau2: float, sigma2: float) -> float:
        v = sigma2 * self.eta
        c = tau2 + v
        r = self.y - theta
        chi = self.dfs2 / v
        ll = self.const - 0.5 * np.log(c).sum() - 0.5 * np.dot(r, r / c)
        ll += np.dot(0.5 * self.df - 1.0, np.log(chi)) - 0.5 * chi.sum()
        if self.jacobian:
            ll -= np.log(v).sum()
        return float(ll)

    def grad(self, theta: float, tau2: float, sigma2: float) -> np.ndarray:
        """Gradient in (theta, tau2, sigma2)."""
        v = sigma2 * self.eta
        w = 1.0 / (tau2 + v)
        r = self.y - theta
        a = 0.5 * (r * r * w * w - w)
        chi = self.dfs2 / v
        g_s = np.dot(self.eta, a) + np.sum(0.5 * chi - (0.5 * self.df - 1.0)) / sigma2
        if self.jacobian:
            g_s -= self.y.size / sigma2
        return np.array([np.dot(r, w), a.sum(), g_s])

    def hessian(self, theta: float, tau2: float, sigma2: float) -> np.ndarray:
        """Analytic Hessian in (theta, tau2, sigma2)."""
        v = sigma2 * self.eta
        w = 1.0 / (tau2 + v)
        r = self.y - theta
        w2 = w * w
        w3 = w2 * w
        b = 0.5 * w2 - r * r * w3  # d2/dc2 of the normal part
        chi = self.dfs2 / v
        h_tt = -w.sum()
        h_tv = -np.dot(r, w2)
        h_ts = -np.dot(self.eta, r * w2)
        h_vv = b.sum()
        h_vs = np.dot(self.eta, b)
        h_ss = np.dot(self.eta ** 2, b) + np.sum((0.5 * self.df - 1.0) - chi) / sigma2 ** 2
        if self.jacobian:
            h_ss += self.y.size / sigma2 ** 2
        return np.array([[h_tt, h_tv, h_ts], [h_tv, h_vv, h_vs], [h_ts, h_vs, h_ss]])


def bd_loglik(theta: float, tau2: float, sigma2: float, data: MetaDataset,
              eta: EtaRule = INVERSE_DF, jacobian: bool = False) -> float:
    """Joint log-likelihood of effect sizes and variance estimates.

    With ``jacobian=True`` the chi-square density is transformed into the
    density of S_i^2 itself (adds ln df_i - ln(sigma2 eta_i) per study).
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if tau2 < 0:
        raise ValueError("tau2 must be non-negative")
    return _Problem(data, eta, jacobian).loglik(theta, tau2, sigma2)


def bd_gradient(theta, tau2, sigma2, data, eta: EtaRule = INVERSE_DF, jacobian: bool = False) -> np.ndarray:
    return _Problem(data, eta, jacobian).grad(theta, tau2, sigma2)


def bd_hessian(theta, tau2, sigma2, data, eta: EtaRule = INVERSE_DF, jacobian: bool = False) -> np.ndarray:
    return _Problem(data, eta, jacobian).hessian(theta, tau2, sigma2)


def bd_score_residuals(theta: float, tau2: float, sigma2: float, data: MetaDataset,
                       eta: EtaRule = INVERSE_DF) -> tuple[float, float, float]:
    """Residuals of the three likelihood equations; zero at an interior maximum.

    The first two are the weighted-mean and tau2 fixed-point equations with
    S_i^2 replaced by sigma2 eta_i (right side minus the parameter). The
    third is left minus right side of the sigma2 equation, written for a
    general eta; with eta_i = 1/df_i it is exactly twice the sigma2 score.
    """
    e = eta.resolve(data)
    v = sigma2 * e
    w = 1.0 / (tau2 + v)
    w2 = w * w
    r = data.y - theta
    res_theta = float(np.dot(w, data.y) / w.sum()) - theta
    res_tau2 = float(np.dot(r * r - v, w2) / w2.sum()) - tau2
    lhs = float(np.dot(e, (r * r - (tau2 + v)) * w2))
    rhs = float(np.sum(((data.df - 2.0) * v - data.df * data.var) * e / (v * v)))
    return res_theta, res_tau2, lhs - rhs


# -- fitting -----------------------------------------------------------------

def _unpack(x):
    theta, ln_tau, ln_sigma = x
    # clipped so line searches cannot overflow
    return theta, math.exp(2.0 * min(max(ln_tau, -300.0), 300.0)), math.exp(2.0 * min(max(ln_sigma, -300.0), 300.0))


def _log_param_derivatives(prob: _Problem, theta: float, tau2: float, sigma2: float):
    """Gradient and Hessian in (theta, ln tau, ln sigma)."""
    g = prob.grad(theta, tau2, sigma2)
    h = prob.hessian(theta, tau2, sigma2)
    jac = np.array([1.0, 2.0 * tau2, 2.0 * sigma2])
    hu = h * np.outer(jac, jac)
    hu[1, 1] += 2.0 * jac[1] * g[1]
    hu[2, 2] += 2.0 * jac[2] * g[2]
    return g * jac, hu


def _neg_obj(prob: _Problem):
    def fun(x):
        theta, tau2, sigma2 = _unpack(x)
        ll = prob.loglik(theta, tau2, sigma2)
        g = prob.grad(theta, tau2, sigma2)
        # chain rule to (theta, ln tau, ln sigma)
        return -ll, -np.array([g[0], 2.0 * tau2 * g[1], 2.0 * sigma2 * g[2]])
    return fun


# convergence when the predicted log-likelihood gain of a Newton step is negligible
DECREMENT_TOL = 1e-10


def _newton_polish(prob: _Problem, theta: float, tau2: float, sigma2: float, free: list[int]):
    """Newton steps in (theta, ln tau, ln sigma) over the ``free`` coordinates."""
    x = np.array([theta, 0.5 * math.log(tau2) if tau2 > 0 else 0.0, 0.5 * math.log(sigma2)])
    for _ in range(30):
        sigma2 = math.exp(2.0 * x[2])
        if 1 in free:
            tau2 = math.exp(2.0 * x[1])
        gu, hu = _log_param_derivatives(prob, x[0], tau2, sigma2)
        gu, hu = gu[free], hu[np.ix_(free, free)]
        if np.max(np.abs(gu)) < 1e-11:
            break
        if not np.all(np.linalg.eigvalsh(hu) < 0):
            break
        step = np.linalg.solve(hu, -gu)
        if np.max(np.abs(step)) > 1.0:
            break
        x_new = x.copy()
        x_new[free] += step
        t_new = math.exp(2.0 * x_new[1]) if 1 in free else tau2
        if prob.loglik(x_new[0], t_new, math.exp(2.0 * x_new[2])) < prob.loglik(x[0], tau2, sigma2) - 1e-12:
            break
        x = x_new
    sigma2 = math.exp(2.0 * x[2])
    if 1 in free:
        tau2 = math.exp(2.0 * x[1])
    return x[0], tau2, sigma2


def _newton_decrement(prob: _Problem, theta, tau2, sigma2, free) -> float:
    """g' (-H)^-1 g over the free log-scale coordinates; inf if not concave."""
    gu, hu = _log_param_derivatives(prob, theta, tau2, sigma2)
    gu, hu = gu[free], -hu[np.ix_(free, free)]
    try:
        c = np.linalg.cholesky(hu)
    except np.linalg.LinAlgError:
        return math.inf
    z = np.linalg.solve(c, gu)
    return float(np.dot(z, z))


def _bfgs(prob: _Problem, x0: np.ndarray, gtol: float, max_iter: int):
    fun = _neg_obj(prob)
    # seed the inverse-Hessian approximation with the curvature at the start
    _, hu = _log_param_derivatives(prob, *_unpack(x0))
    lam, vec = np.linalg.eigh(-hu)
    lam = np.maximum(np.abs(lam), 1e-8 * max(np.abs(lam).max(), 1.0))
    h0 = (vec / lam) @ vec.T
    h0 = 0.5 * (h0 + h0.T)
    return optimize.minimize(fun, x0, jac=True, method="BFGS",
                             options={"gtol": gtol, "maxiter": max_iter, "hess_inv0": h0})


def _optimize(prob: _Problem, x0, gtol: float, max_iter: int, tau2_floor: float, restarts: int = 3):
    """Quasi-Newton search in (theta, ln tau, ln sigma) plus Newton polishing.

    ln tau -> -inf is a spurious stationary direction whenever the tau2
    score at zero is positive; such runs are restarted from an interior tau2.
    """
    x = np.asarray(x0, float)
    nit = 0
    for _ in range(restarts + 1):
        res = _bfgs(prob, x, gtol, max_iter)
        nit += int(res.nit)
        theta, tau2, sigma2 = _unpack(res.x)
        if not all(map(math.isfinite, (theta, tau2, sigma2))):
            return None
        if tau2 >= tau2_floor:
            theta, tau2, sigma2 = _newton_polish(prob, theta, tau2, sigma2, [0, 1, 2])
            ok = _newton_decrement(prob, theta, tau2, sigma2, [0, 1, 2]) < DECREMENT_TOL
            return (theta, tau2, sigma2), prob.loglik(theta, tau2, sigma2), ok, nit
        # boundary: tau2 pinned at zero, optimality needs a non-positive tau2 score
        theta, _, sigma2 = _newton_polish(prob, theta, 0.0, sigma2, [0, 2])
        g = prob.grad(theta, 0.0, sigma2)
        if g[1] <= 1e-8:
            ok = _newton_decrement(prob, theta, 0.0, sigma2, [0, 2]) < DECREMENT_TOL
            return (theta, 0.0, sigma2), prob.loglik(theta, 0.0, sigma2), ok, nit
        v = sigma2 * prob.eta
        w2 = 1.0 / (v * v)
        r = prob.y - theta
        tau2_new = max(float(np.dot(r * r - v, w2) / w2.sum()), float(np.median(v)))
        x = np.array([theta, 0.5 * math.log(tau2_new), 0.5 * math.log(sigma2)])
    return None


def bd_mle(data: MetaDataset, eta: EtaRule = INVERSE_DF, jacobian: bool = False,
           gtol: float = 1e-9, max_iter: int = 500) -> BdEstimate:
    """Maximise the bivariate likelihood from two starts and keep the best.

    The primary start is the DerSimonian-Laird fit with the median of
    S_i^2 / eta_i for sigma2; the secondary mimics a data-agnostic start
    (theta 0, ln tau 0, sigma 10).
    """
    prob = _Problem(data, eta, jacobian)
    dl = dl_fit(data)
    tau2_0 = max(dl.tau2_hat, 1e-4)
    sigma2_0 = float(np.median(data.var / prob.eta))
    starts = [
        (dl.theta_hat, 0.5 * math.log(tau2_0), 0.5 * math.log(sigma2_0)),
        (0.0, 0.0, math.log(10.0)),
    ]
    floor = 1e-8 * float(np.median(data.var))
    runs = []
    total_iter = 0
    for x0 in starts:
        try:
            out = _optimize(prob, x0, gtol, max_iter, floor)
        except (FloatingPointError, OverflowError, ValueError, np.linalg.LinAlgError):
            continue
        if out is None:
            continue
        params, ll, ok, nit = out
        total_iter += nit
        if ok:
            runs.append((ll, params))
    if not runs:
        raise NonConvergence("bivariate likelihood: no start converged")
    ll, (theta, tau2, sigma2) = max(runs, key=lambda t: t[0])
    diagnostics: dict = {"starts_converged": len(runs), "tau2_boundary": tau2 == 0.0}
    tau2_report = tau2
    se, se_diag = _standard_error(prob, theta, tau2, sigma2)
    diagnostics.update(se_diag)
    return BdEstimate(theta, tau2_report, sigma2, se, ll, True, total_iter, diagnostics)


def _numeric_hessian(prob: _Problem, p: np.ndarray) -> np.ndarray:
    """Central differences of the analytic gradient, step 1e-5 (1 + |p|)."""
    h = np.empty((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1e-5 * (1.0 + abs(p[j]))
        if j == 1 and p[1] - e[1] < 0:
            # one-sided at the tau2 boundary
            h[:, j] = (prob.grad(*(p + e)) - prob.grad(*p)) / e[j]
        else:
            h[:, j] = (prob.grad(*(p + e)) - prob.grad(*(p - e))) / (2 * e[j])
    return 0.5 * (h + h.T)


def _standard_error(prob: _Problem, theta, tau2, sigma2) -> tuple[float, dict]:
    p = np.array([theta, tau2, sigma2])
    neg_h = -_numeric_hessian(prob, p)
    try:
        np.linalg.cholesky(neg_h)
        cov = np.linalg.inv(neg_h)
        return math.sqrt(cov[0, 0]), {}
    except np.linalg.LinAlgError:
        # theta-marginal curvature
        return 1.0 / math.sqrt(neg_h[0, 0]), {"hessian_not_pd": True}


def bd_fit(data: MetaDataset, alpha: float = 0.05, eta: EtaRule = INVERSE_DF,
           jacobian: bool = False) -> FitResult:
    """Bivariate estimate with a t interval on m - 1 df."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    est = bd_mle(data, eta, jacobian)
    crit = student_t_quantile(1.0 - alpha / 2.0, data.m - 1)
    diagnostics = dict(est.diagnostics, se=est.se_theta, critical_value=crit,
                       loglik=est.loglik_at_max, jacobian=jacobian)
    return FitResult(
        method=Method.BD,
        theta_hat=est.theta_hat,
        ci_low=est.theta_hat - crit * est.se_theta,
        ci_high=est.theta_hat + crit * est.se_theta,
        alpha=alpha,
        tau2_hat=est.tau2_hat,
        sigma2_hat=est.sigma2_hat,
        converged=est.converged,
        iterations=est.iterations,
        diagnostics=diagnostics,
    )
