"""Special functions, quantiles and seeded sampling primitives.

Quantiles and log-gamma are thin wrappers over :mod:`scipy.special`; the
wrappers pin down argument checking so that callers get a ``DomainError``
instead of a silent ``nan``.

Random streams are derived from ``(master_seed, path)`` with
:class:`numpy.random.SeedSequence`, so a stream is a pure function of its
seed and path and replications can be farmed out to any number of workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special


class DomainError(ValueError):
    """Argument outside the domain of a special function or sampler."""


def _check_prob(p: float) -> None:
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")


def _check_df(d: float) -> None:
    if not (d > 0.0) or math.isinf(d):
        raise DomainError(f"degrees of freedom must be positive and finite, got {d!r}")


def log_gamma(x: float) -> float:
    """ln Gamma(x) for x > 0."""
    if not (x > 0.0):
        raise DomainError(f"log_gamma requires x > 0, got {x!r}")
    return float(special.gammaln(x))


def chi_square_quantile(p: float, d: float) -> float:
    """Lower p-quantile of the chi-square distribution with (real) d df."""
    _check_prob(p)
    _check_df(d)
    return float(2.0 * special.gammaincinv(0.5 * d, p))


def student_t_quantile(p: float, d: float) -> float:
    """Lower p-quantile of Student's t with (real) d df."""
    _check_prob(p)
    _check_df(d)
    return float(special.stdtrit(d, p))


def normal_quantile(p: float) -> float:
    _check_prob(p)
    return float(special.ndtri(p))


@dataclass
class RngStream:
    """Single-owner random stream tied to a derivation path.

    Do not share one stream between concurrent tasks; derive one per task.
    """

    master_seed: int
    path: tuple[int, ...]
    generator: np.random.Generator = field(repr=False, compare=False, default=None)

    def __post_init__(self) -> None:
        if self.generator is None:
            seq = np.random.SeedSequence(int(self.master_seed), spawn_key=tuple(int(k) for k in self.path))
            self.generator = np.random.Generator(np.random.PCG64(seq))

    def uniform(self, size=None):
        return self.generator.random(size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)


def derive_stream(master_seed: int, path: Sequence[int] = ()) -> RngStream:
    """Stream for ``path`` under ``master_seed``; same inputs give the same draws."""
    if any(int(k) < 0 for k in path):
        raise DomainError("stream path entries must be non-negative integers")
    return RngStream(int(master_seed), tuple(int(k) for k in path))


def sample_gamma(rng: RngStream, shape: float, rate: float) -> float:
    """Gamma draw in the shape/rate convention (mean shape/rate)."""
    if not (shape > 0 and rate > 0):
        raise DomainError("gamma shape and rate must be positive")
    return float(rng.generator.gamma(shape, 1.0 / rate))


def sample_poisson(rng: RngStream, mean: float) -> int:
    if not (mean >= 0):
        raise DomainError("poisson mean must be non-negative")
    return int(rng.generator.poisson(mean))


def sample_binomial(rng: RngStream, n: int, p: float) -> int:
    if n < 0 or not (0.0 <= p <= 1.0):
        raise DomainError("binomial needs n >= 0 and p in [0, 1]")
    return int(rng.generator.binomial(n, p))


def psd_factor(cov) -> np.ndarray:
    """Return L with L @ L.T == cov for a symmetric PSD matrix.

    Eigenvalues down to -1e-10 * trace are clipped to zero; anything more
    negative is rejected.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DomainError("covariance must be a square matrix")
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise DomainError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    tol = 1e-10 * max(float(np.trace(cov)), 0.0)
    if vals.min() < -tol:
        raise DomainError(f"covariance is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_trivariate_normal(rng: RngStream, cov, factor: np.ndarray | None = None) -> tuple[float, float, float]:
    """Zero-mean trivariate normal draw.

    ``factor`` may carry a precomputed :func:`psd_factor` of ``cov`` to skip
    the eigendecomposition in tight loops.
    """
    if factor is None:
        factor = psd_factor(cov)
    if factor.shape != (3, 3):
        raise DomainError("trivariate sampler needs a 3x3 covariance")
    z = rng.generator.standard_normal(3)
    x = factor @ z
    return float(x[0]), float(x[1]), float(x[2])
