"""Study records, validated datasets and fit results."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

import numpy as np


class Method(str, Enum):
    DL = "DL"
    HT = "HT"
    NB = "NB"
    GS = "GS"
    BD = "BD"


ALL_METHODS = (Method.DL, Method.HT, Method.NB, Method.GS, Method.BD)


class ValidationError(ValueError):
    """Dataset invariant violated."""


class EmptyOrSingleton(ValidationError):
    pass


class NonPositiveSE(ValidationError):
    pass


class NonPositiveDf(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class EstimationError(RuntimeError):
    """Base for numerical failures inside an estimator."""


class NonConvergence(EstimationError):
    def __init__(self, message: str, last_iterate: Any = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class BracketFailure(EstimationError):
    pass


class DegenerateWeights(EstimationError):
    pass


class SingularMatrix(EstimationError):
    pass


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    y: float
    se: float
    df: float


@dataclass(frozen=True, eq=False)
class MetaDataset:
    """Ordered, validated studies. Build with :func:`validate_dataset`.

    The ``y``, ``se``, ``var`` and ``df`` arrays are cached read-only views
    used by every estimator.
    """

    records: tuple[StudyRecord, ...]
    y: np.ndarray = field(repr=False)
    se: np.ndarray = field(repr=False)
    var: np.ndarray = field(repr=False)
    df: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, MetaDataset) and self.records == other.records

    def __hash__(self) -> int:
        return hash(self.records)

    def shifted(self, c: float) -> "MetaDataset":
        return validate_dataset(StudyRecord(r.study_id, r.y + c, r.se, r.df) for r in self.records)

    def scaled(self, c: float) -> "MetaDataset":
        return validate_dataset(StudyRecord(r.study_id, r.y * c, r.se * c, r.df) for r in self.records)


def _readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


def validate_dataset(records: Iterable[StudyRecord]) -> MetaDataset:
    """The only supported way to build a :class:`MetaDataset`."""
    records = tuple(records)
    if len(records) < 2:
        raise EmptyOrSingleton(f"need at least 2 studies, got {len(records)}")
    seen: set[str] = set()
    for r in records:
        if not math.isfinite(r.y):
            raise ValidationError(f"study {r.study_id!r}: effect size must be finite")
        if not (r.se > 0) or not math.isfinite(r.se):
            raise NonPositiveSE(f"study {r.study_id!r}: standard error must be positive, got {r.se!r}")
        if not (r.df > 0) or not math.isfinite(r.df):
            raise NonPositiveDf(f"study {r.study_id!r}: degrees of freedom must be positive, got {r.df!r}")
        if r.study_id in seen:
            raise DuplicateId(f"duplicate study id {r.study_id!r}")
        seen.add(r.study_id)
    se = _readonly([r.se for r in records])
    return MetaDataset(
        records=records,
        y=_readonly([r.y for r in records]),
        se=se,
        var=_readonly(se * se),
        df=_readonly([r.df for r in records]),
    )


def dataset_from_arrays(y, se, df=None, ids=None) -> MetaDataset:
    """Convenience constructor; ``df`` defaults to 10 per study."""
    y = list(map(float, y))
    se = list(map(float, se))
    df = [10.0] * len(y) if df is None else list(map(float, df))
    ids = [str(i + 1) for i in range(len(y))] if ids is None else list(ids)
    return validate_dataset(StudyRecord(i, a, b, c) for i, a, b, c in zip(ids, y, se, df))


@dataclass
class FitResult:
    method: Method
    theta_hat: float
    ci_low: float
    ci_high: float
    alpha: float
    tau2_hat: float
    sigma2_hat: float | None = None
    converged: bool = True
    iterations: int = 0
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def covers(self, value: float) -> bool:
        # closed interval: ties count as covered
        return self.ci_low <= value <= self.ci_high

    def as_dict(self) -> dict[str, Any]:
        return {
            "method": self.method.value,
            "theta_hat": self.theta_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "alpha": self.alpha,
            "tau2_hat": self.tau2_hat,
            "sigma2_hat": self.sigma2_hat,
            "converged": self.converged,
            "iterations": self.iterations,
            "diagnostics": dict(self.diagnostics),
        }
