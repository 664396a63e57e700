import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metapool.model import dataset_from_arrays

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def three_study():
    """Y=(0,2,4), S=1: DL tau2=3, HT tau2=5/3."""
    return dataset_from_arrays([0.0, 2.0, 4.0], [1.0, 1.0, 1.0], [10.0, 10.0, 10.0])


@pytest.fixture
def uneven():
    rng = np.random.default_rng(7)
    m = 8
    se = rng.uniform(0.4, 1.6, m)
    y = 1.0 + rng.normal(0.0, 0.8, m) + rng.normal(0.0, se)
    df = rng.uniform(8.0, 60.0, m)
    return dataset_from_arrays(y, se, df)


# acceptance criteria report: criterion id -> (passed, detail)
ACCEPTANCE: dict[str, tuple[bool | None, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        tag = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"[{tag}] criterion {key}: {detail}")
