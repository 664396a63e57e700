"""Random-effects meta-analysis of mean differences with small-sample corrections.

Five estimators are provided: DerSimonian-Laird (DL), the Hardy-Thompson
profile likelihood (HT), its Bartlett-corrected variant (NB), the Skovgaard
modified signed root (GS) and a bivariate likelihood (BD) that also models
the reported within-study variances.
"""
from .bivariate import INVERSE_DF, EtaRule, bd_fit, bd_mle
from .classic import cochran_q, dl_fit, dl_tau2
from .harness import BenchmarkConfig, PerformanceSummary, fit_methods, run_benchmark
from .likelihood import gs_ci, ht_mle, ht_profile_ci, nb_ci, profile_tau2
from .model import (
    ALL_METHODS,
    EstimationError,
    FitResult,
    MetaDataset,
    Method,
    StudyRecord,
    ValidationError,
    dataset_from_arrays,
    validate_dataset,
)
from .simulation import IpdSettings, preset, simulate_meta_dataset
from .statkit import derive_stream

__version__ = "0.1.0"
