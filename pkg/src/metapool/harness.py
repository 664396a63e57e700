"""Monte Carlo benchmark: bias, MSE, coverage and mean tau2 per method.

Every replication gets its own stream derived from
``(master_seed, (setting, m, rep))`` and all methods see the same dataset,
so results do not depend on how replications are distributed over workers.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .bivariate import INVERSE_DF, EtaRule, bd_fit
from .classic import dl_fit
from .likelihood import gs_ci, ht_mle, ht_profile_ci, nb_ci
from .model import ALL_METHODS, EstimationError, FitResult, Method
from .simulation import IpdSettings, preset, simulate_meta_dataset
from .statkit import RngStream, derive_stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkConfig:
    settings: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    m_values: tuple[int, ...] = (10, 20, 30)
    n_reps: int = 1000
    alpha: float = 0.05
    master_seed: int = 1
    methods: tuple[Method, ...] = ALL_METHODS

    def __post_init__(self):
        object.__setattr__(self, "settings", tuple(int(s) for s in self.settings))
        object.__setattr__(self, "m_values", tuple(int(m) for m in self.m_values))
        object.__setattr__(self, "methods", tuple(Method(x) for x in self.methods))
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if any(m < 2 for m in self.m_values):
            raise ValueError("every m must be >= 2")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not self.methods:
            raise ValueError("at least one method is required")
        for s in self.settings:
            preset(s)


@dataclass(frozen=True)
class ReplicationOutcome:
    theta_hat: float = math.nan
    covered: bool = False
    tau2_hat: float = math.nan
    converged: bool = False
    error: str | None = None


@dataclass
class MethodSummary:
    bias: float
    mse: float
    coverage: float
    mean_tau2: float
    n_converged: int
    n_failed: int


@dataclass
class PerformanceSummary:
    setting: int
    m: int
    theta_true: float
    methods: dict[Method, MethodSummary | None] = field(default_factory=dict)


class AllFailed(RuntimeError):
    pass


def fit_methods(data, methods: Sequence[Method], alpha: float,
                eta: EtaRule = INVERSE_DF) -> dict[Method, FitResult | Exception]:
    """Fit each method on one dataset; failures come back as the exception.

    HT, NB and GS share a single maximum likelihood fit.
    """
    out: dict[Method, FitResult | Exception] = {}
    mle = None
    need_ht = any(m in (Method.HT, Method.NB, Method.GS) for m in methods)
    if need_ht:
        try:
            mle = ht_mle(data)
        except EstimationError as exc:
            mle = exc
    for method in methods:
        try:
            if method is Method.DL:
                out[method] = dl_fit(data, alpha)
            elif method is Method.BD:
                out[method] = bd_fit(data, alpha, eta)
            else:
                if isinstance(mle, Exception):
                    raise mle
                fn = {Method.HT: ht_profile_ci, Method.NB: nb_ci, Method.GS: gs_ci}[method]
                out[method] = fn(data, alpha, mle=mle)
        except (EstimationError, ArithmeticError, ValueError) as exc:
            out[method] = exc
    return out


def run_replication(settings: IpdSettings, m: int, methods: Sequence[Method], alpha: float,
                    rng: RngStream) -> dict[Method, ReplicationOutcome]:
    data, theta_true = simulate_meta_dataset(settings, m, rng)
    outcomes = {}
    for method, fit in fit_methods(data, [Method(x) for x in methods], alpha).items():
        if isinstance(fit, Exception):
            outcomes[method] = ReplicationOutcome(error=f"{type(fit).__name__}: {fit}")
        else:
            outcomes[method] = ReplicationOutcome(fit.theta_hat, fit.covers(theta_true), fit.tau2_hat, True)
    return outcomes


def summarize(results: Iterable[dict[Method, ReplicationOutcome]], theta_true: float,
              methods: Sequence[Method] | None = None) -> dict[Method, MethodSummary]:
    """Aggregate replications per method in index order (floating-point stable).

    Raises :class:`AllFailed` when a method has no converged replication.
    """
    results = list(results)
    if methods is None:
        methods = [m for m in ALL_METHODS if any(m in r for r in results)]
    summary = {}
    for method in methods:
        ok = [r[method] for r in results if method in r and r[method].converged]
        failed = sum(1 for r in results if method in r and not r[method].converged)
        if not ok:
            raise AllFailed(f"{Method(method).value}: no converged replication")
        n = len(ok)
        errs = [o.theta_hat - theta_true for o in ok]
        summary[Method(method)] = MethodSummary(
            bias=math.fsum(errs) / n,
            mse=math.fsum(e * e for e in errs) / n,
            coverage=sum(o.covered for o in ok) / n,
            mean_tau2=math.fsum(o.tau2_hat for o in ok) / n,
            n_converged=n,
            n_failed=failed,
        )
    return summary


def _replication_task(args):
    setting_id, m, rep, methods, alpha, seed = args
    rng = derive_stream(seed, (setting_id, m, rep))
    return run_replication(preset(setting_id), m, methods, alpha, rng)


def run_cell(config: BenchmarkConfig, setting_id: int, m: int, executor=None) -> PerformanceSummary:
    tasks = [(setting_id, m, rep, config.methods, config.alpha, config.master_seed)
             for rep in range(config.n_reps)]
    if executor is None:
        results = [_replication_task(t) for t in tasks]
    else:
        results = list(executor.map(_replication_task, tasks, chunksize=max(1, len(tasks) // 64)))
    theta_true = preset(setting_id).theta
    cell = PerformanceSummary(setting_id, m, theta_true)
    for method in config.methods:
        try:
            cell.methods[method] = summarize(results, theta_true, [method])[method]
        except AllFailed:
            cell.methods[method] = None
    return cell


def run_benchmark(config: BenchmarkConfig, workers: int = 1) -> list[PerformanceSummary]:
    """Full settings x m grid; output does not depend on ``workers``."""
    cells = []
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for s in config.settings:
            for m in config.m_values:
                log.info("setting %d, m=%d: %d replications", s, m, config.n_reps)
                cells.append(run_cell(config, s, m, executor))
    finally:
        if executor is not None:
            executor.shutdown()
    return cells
