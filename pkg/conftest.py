import numpy as np
import pytest

from smallarea.data_model import Dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Run the slow acceptance studies.")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance study (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="slow study, run with --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def make_dataset():
    """Factory for in-memory datasets; department = first two characters of the municipality code."""

    def _make(muni, X, Y, role="survey", weights=None, source_rows=None):
        muni = np.asarray(muni, dtype=object)
        n = muni.shape[0]
        X = np.asarray(X, dtype=float)
        X = np.zeros((n, 0)) if X.size == 0 else X.reshape(n, -1)
        Y = np.asarray(Y, dtype=float).reshape(n, -1)
        return Dataset(
            role=role,
            muni=muni,
            dept=np.array([m[:2] for m in muni.tolist()], dtype=object),
            covariates=X,
            indicators=Y,
            weights=np.ones(n) if weights is None else np.asarray(weights, dtype=float),
            covariate_names=tuple(f"x_{j + 1}" for j in range(X.shape[1])),
            indicator_names=tuple(f"y_{k + 1}" for k in range(Y.shape[1])),
            source_rows=source_rows,
        )

    return _make


@pytest.fixture
def simulate_glmm(make_dataset):
    """Random-intercept logit data: D domains of n_d units, covariates N(0, 1)."""

    def _simulate(rng, D, n_d, beta, sigma_u):
        beta = np.asarray(beta, dtype=float)
        p = beta.shape[0] - 1
        groups = np.repeat(np.arange(D), n_d)
        X = rng.normal(size=(D * n_d, p))
        u = rng.normal(0.0, sigma_u, size=D) if sigma_u > 0 else np.zeros(D)
        eta = beta[0] + X @ beta[1:] + u[groups]
        y = (rng.random(D * n_d) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        muni = np.array([f"{d % 9 + 1:02d}{d:03d}" for d in groups], dtype=object)
        return make_dataset(muni, X, y[:, None])

    return _simulate
