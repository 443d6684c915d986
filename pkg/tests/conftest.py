import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from netobserve.models import linear_model, load_model, logistic_model

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def h2o2():
    return load_model("h2o2_mini")


@pytest.fixture(scope="session")
def hill5():
    return load_model("hill5")


@pytest.fixture(scope="session")
def hill6():
    return load_model("hill6")


@pytest.fixture(scope="session")
def mass_spring():
    return load_model("mass_spring_chain")


@pytest.fixture(scope="session")
def decay_model():
    return linear_model([[-1.0]])


@pytest.fixture(scope="session")
def logistic():
    return logistic_model()


def interior_state(model, rng):
    """Random state strictly inside the model bounds (or in [-1, 1] when unbounded)."""
    lo, hi = model.lower, model.upper
    u = rng.uniform(0.1, 0.9, model.n)
    x = 2 * u - 1
    both = np.isfinite(lo) & np.isfinite(hi)
    x[both] = lo[both] + u[both] * (hi[both] - lo[both])
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    x[only_lo] = lo[only_lo] + 0.5 + u[only_lo]
    return x
