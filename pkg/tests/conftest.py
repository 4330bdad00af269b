import numpy as np
import pytest

from sandreg.data import ClusterDataset


def random_dataset(rng, I=20, sizes=(2, 6), p=3, beta=None, noise=1.0):
    """Gaussian linear clusters with uniform random sizes."""
    beta = np.ones(p) if beta is None else np.asarray(beta, dtype=float)
    ys, xs = [], []
    for _ in range(I):
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        x = rng.standard_normal((n, p))
        y = x @ beta + noise * rng.standard_normal(n)
        ys.append(y)
        xs.append(x)
    return ClusterDataset.from_arrays(ys, xs)


def random_spd(rng, n, lo=0.5, hi=2.0):
    """Well-conditioned random SPD matrix with eigenvalues in [lo, hi]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(lo, hi, size=n)) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
