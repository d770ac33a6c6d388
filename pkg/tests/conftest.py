import numpy as np
import pytest

from flare.data import generate_split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_split():
    """Ten 8x8 training samples and four test samples."""
    train, test, _ = generate_split(8, 10, 4, seed=3)
    return train, test


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out
