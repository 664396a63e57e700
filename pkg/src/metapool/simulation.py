"""Individual participant data generator for two-arm studies.

Each study draws an overdispersed Poisson sample size, splits it
binomially into two groups and fills responses from a heteroscedastic
linear mixed model

    Y_ijk = mu_j + U_ij + xi_j * exp(kappa * V_i) * eps_ijk,

with (U_i0, U_i1, V_i) trivariate normal. ``kappa = 1`` puts exp(V) on the
residual standard deviation; ``kappa = 0.5`` puts it on the residual
variance, which is what the benchmark presets use. Studies are then reduced
to the (mean difference, standard error, Satterthwaite df) triplet.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .model import MetaDataset, StudyRecord, validate_dataset
from .statkit import (
    RngStream,
    psd_factor,
    sample_binomial,
    sample_gamma,
    sample_poisson,
    sample_trivariate_normal,
)

MAX_FRAME_ATTEMPTS = 10_000
MAX_STUDY_ATTEMPTS = 100


class GenerationError(RuntimeError):
    pass


class ZeroVariance(GenerationError):
    pass


@dataclass(frozen=True)
class IpdSettings:
    lam: float = 100.0
    a0: float = 1.0
    b0: float = 1.0
    p: float = 0.5
    mu0: float = 160.0
    mu1: float = 162.0
    xi0_sq: float = 100.0
    xi1_sq: float = 100.0
    sigma0_sq: float = 0.0
    sigma1_sq: float = 0.0
    sigma2_sq: float = 0.0
    rho_m: float = 0.0
    rho_v: float = 0.0
    v_exponent: float = 1.0
    _factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.lam > 0 and self.a0 > 0 and self.b0 > 0):
            raise ValueError("lam, a0 and b0 must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be a probability")
        if not (self.xi0_sq > 0 and self.xi1_sq > 0):
            raise ValueError("residual variances must be positive")
        if min(self.sigma0_sq, self.sigma1_sq, self.sigma2_sq) < 0:
            raise ValueError("random-effect variances must be non-negative")
        if not (self.v_exponent >= 0 and math.isfinite(self.v_exponent)):
            raise ValueError("v_exponent must be finite and non-negative")
        if not (-1 <= self.rho_m <= 1 and -1 <= self.rho_v <= 1):
            raise ValueError("correlations must lie in [-1, 1]")
        # raises DomainError if the implied covariance is not PSD
        object.__setattr__(self, "_factor", psd_factor(self.covariance()))

    @property
    def theta(self) -> float:
        return self.mu0 - self.mu1

    @property
    def tau2(self) -> float:
        """Variance of U_i0 - U_i1."""
        s0, s1 = math.sqrt(self.sigma0_sq), math.sqrt(self.sigma1_sq)
        return self.sigma0_sq + self.sigma1_sq - 2.0 * self.rho_m * s0 * s1

    def covariance(self) -> np.ndarray:
        s0, s1, s2 = (math.sqrt(v) for v in (self.sigma0_sq, self.sigma1_sq, self.sigma2_sq))
        rm, rv = self.rho_m, self.rho_v
        return np.array([
            [s0 * s0, rm * s0 * s1, rv * s0 * s2],
            [rm * s0 * s1, s1 * s1, rv * s1 * s2],
            [rv * s0 * s2, rv * s1 * s2, s2 * s2],
        ])

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.init}

    @classmethod
    def from_dict(cls, d: dict) -> "IpdSettings":
        names = {f.name for f in fields(cls) if f.init}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown settings fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


# (exposed, control) random-effect variances, sigma2^2, rho_M, rho_V per setting
_PRESETS = {
    1: (0.0, 0.0, 0.0, 0.0, 0.0),
    2: (2.0, 3.0, 0.0, 0.7, 0.0),
    3: (2.0, 3.0, 1.0, 0.7, 0.0),
    4: (2.0, 3.0, 1.0, 0.7, 0.3),
    5: (2.0, 3.0, 1.0, 0.7, 0.5),
    6: (2.0, 3.0, 1.0, 0.7, 0.7),
}
PRESET_V_EXPONENT = 0.5


def preset(setting_id: int) -> IpdSettings:
    """Benchmark settings 1-6 (theta = -2, lambda = 100, xi^2 = 100).

    Group 0 (the minuend of the contrast) is the control group and group 1
    the exposed group, so the control variance lands in ``sigma0_sq``.
    exp(V) scales the residual variance (``v_exponent = 0.5``).
    """
    if setting_id not in _PRESETS:
        raise ValueError(f"setting id must be in 1..6, got {setting_id!r}")
    exposed, control, s2, rm, rv = _PRESETS[setting_id]
    return IpdSettings(sigma0_sq=control, sigma1_sq=exposed, sigma2_sq=s2, rho_m=rm, rho_v=rv,
                       v_exponent=PRESET_V_EXPONENT)


@dataclass(frozen=True)
class StudyIpd:
    n0: int
    n1: int
    responses0: np.ndarray = field(repr=False)
    responses1: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.responses0) != self.n0 or len(self.responses1) != self.n1:
            raise ValueError("response vectors do not match group sizes")


def draw_study_frame(settings: IpdSettings, rng: RngStream) -> tuple[int, int]:
    """Group sizes; the whole frame is redrawn until both groups have >= 2."""
    for _ in range(MAX_FRAME_ATTEMPTS):
        gamma = sample_gamma(rng, settings.a0, settings.b0)
        n = sample_poisson(rng, settings.lam * math.exp(0.5 * gamma))
        n0 = sample_binomial(rng, n, settings.p)
        n1 = n - n0
        if n0 >= 2 and n1 >= 2:
            return n0, n1
    raise GenerationError(f"no frame with both groups >= 2 after {MAX_FRAME_ATTEMPTS} attempts")


def simulate_study(settings: IpdSettings, rng: RngStream) -> StudyIpd:
    n0, n1 = draw_study_frame(settings, rng)
    u0, u1, v = sample_trivariate_normal(rng, None, factor=settings._factor)
    scale = math.exp(settings.v_exponent * v)
    eps = rng.standard_normal(n0 + n1)
    y0 = settings.mu0 + u0 + math.sqrt(settings.xi0_sq) * scale * eps[:n0]
    y1 = settings.mu1 + u1 + math.sqrt(settings.xi1_sq) * scale * eps[n0:]
    return StudyIpd(n0, n1, y0, y1)


def aggregate_study(ipd: StudyIpd, study_id: str = "1") -> StudyRecord:
    """Mean difference, its standard error and Satterthwaite df."""
    n0, n1 = ipd.n0, ipd.n1
    if n0 < 2 or n1 < 2:
        raise ValueError("each group needs at least two responses")
    v0 = float(np.var(ipd.responses0, ddof=1))
    v1 = float(np.var(ipd.responses1, ddof=1))
    a0, a1 = v0 / n0, v1 / n1
    s2 = a0 + a1
    if not s2 > 0:
        raise ZeroVariance("all responses identical; standard error is zero")
    df = s2 * s2 / (a0 * a0 / (n0 - 1) + a1 * a1 / (n1 - 1))
    y = float(np.mean(ipd.responses0) - np.mean(ipd.responses1))
    return StudyRecord(study_id, y, math.sqrt(s2), df)


def simulate_meta_dataset(settings: IpdSettings, m: int, rng: RngStream) -> tuple[MetaDataset, float]:
    if m < 2:
        raise ValueError("need m >= 2 studies")
    records = []
    for i in range(m):
        for _ in range(MAX_STUDY_ATTEMPTS):
            try:
                records.append(aggregate_study(simulate_study(settings, rng), str(i + 1)))
                break
            except ZeroVariance:
                continue
        else:
            raise GenerationError(f"study {i + 1}: zero variance in {MAX_STUDY_ATTEMPTS} attempts")
    return validate_dataset(records), settings.theta
