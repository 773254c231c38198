import numpy as np
import pytest

from ncoiv.data import Dataset


def make_dataset(rng, n=50, K=3, p=2, intercept=True, noise=1.0, with_m=True):
    """Linear IV data with an endogenous treatment and valid instruments."""
    z = rng.standard_normal((n, K))
    cols = [np.ones(n)] if intercept else []
    cols += [rng.standard_normal(n) for _ in range(p - len(cols))]
    x = np.column_stack(cols) if cols else np.zeros((n, 0))
    u = noise * rng.standard_normal(n)
    t = z @ rng.uniform(0.3, 1.0, K) + 0.5 * u + rng.standard_normal(n)
    if x.shape[1]:
        t = t + x @ rng.uniform(-0.5, 0.5, x.shape[1])
    y = 0.8 * t + (x @ np.linspace(1.0, -1.0, x.shape[1]) if x.shape[1] else 0.0) + u
    m = 0.6 * u + 1.0 if with_m else None
    return Dataset(y=y, t=t, x=x, z=z, m=m, intercept=intercept)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
