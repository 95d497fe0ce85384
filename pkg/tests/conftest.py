import sys

import numpy as np
import pytest

from corrprobit.model import ProbitModel, centering, normalize


def random_model(rng: np.random.Generator, n: int, mean_scale: float = 1.0) -> ProbitModel:
    """Normalized model with Wishart-like covariance."""
    w = rng.standard_normal((n, n + 2))
    return normalize(ProbitModel(mean_scale * rng.standard_normal(n), w @ w.T / (n + 2)))[0]


def exchangeable(n: int) -> ProbitModel:
    return ProbitModel(np.zeros(n), n / (n - 1) * centering(n), normalized=True)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        terminalreporter.write_line(results[k])
