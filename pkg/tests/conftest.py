import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bvcqr.design import build_design
from bvcqr.preprocess import ExposurePanel, quantize

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_panel(n=5, M=3, p=1, visits=(12.0, 24.0, 36.0), seed=0, detect=None, lod=None):
    """Small balanced panel with Gaussian exposures and outcomes."""
    rng = np.random.default_rng(seed)
    J = len(visits)
    return ExposurePanel(
        subject_ids=np.array([f"s{i}" for i in range(n)]),
        covariates=rng.normal(size=(n, p)),
        exposures=rng.normal(size=(n, M)),
        obs_subject=np.repeat(np.arange(n), J),
        ages=np.tile(np.asarray(visits, dtype=float), n),
        y=rng.normal(size=n * J),
        exposure_names=tuple(f"c{m}" for m in range(M)),
        covariate_names=tuple(f"x_{k + 1}" for k in range(p)),
        detect=detect,
        lod=lod,
    )


@pytest.fixture
def small_panel():
    return make_panel()


@pytest.fixture
def small_design(small_panel):
    return build_design(small_panel, quantize(small_panel))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
