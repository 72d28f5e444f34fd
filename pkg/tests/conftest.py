import numpy as np
import pytest

from bnp_ood.data import EmbeddingDataset

ACCEPTANCE_LINES = []


def make_dataset(seed, K=3, D=2, n=12, spread=3.0, hetero=True):
    """Gaussian clusters with random means and (optionally) class-specific covariances."""
    rng = np.random.default_rng(seed)
    Xs = []
    for k in range(K):
        A = rng.normal(size=(D, D)) * (0.6 if hetero else 0.0) + np.eye(D)
        Xs.append(rng.normal(size=D) * spread + rng.normal(size=(n, D)) @ A.T)
    return EmbeddingDataset.from_arrays(np.concatenate(Xs), np.repeat(np.arange(K), n), K)


@pytest.fixture
def small_ds():
    return make_dataset(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
