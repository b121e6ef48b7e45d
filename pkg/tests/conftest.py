import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedol.glm import Batch, GlmFamily

settings.register_profile(
    "fedol", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("fedol")

GAUSS = GlmFamily.gaussian()
LOGIT = GlmFamily.logistic()


def random_batch(rng, n, p, family, source_id=0, batch_index=1, beta=None):
    X = rng.standard_normal((n, p))
    beta = rng.normal(scale=0.5, size=p) if beta is None else beta
    eta = X @ beta
    if family.kind.value == "gaussian":
        y = eta + rng.standard_normal(n)
    else:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    return Batch(source_id, batch_index, X, y, family)


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
