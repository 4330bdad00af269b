import numpy as np
import pytest

from sandreg.data import ClusterData, ClusterDataset
from sandreg.errors import DataError


def test_cluster_promotes_vector_covariate():
    c = ClusterData([1.0, 2.0], [3.0, 4.0])
    assert c.x.shape == (2, 1)
    assert c.n == 2 and c.p == 1


def test_cluster_shape_mismatch():
    with pytest.raises(DataError):
        ClusterData([1.0, 2.0], np.ones((3, 2)))


def test_cluster_rejects_nonfinite():
    with pytest.raises(DataError):
        ClusterData([1.0, np.nan], np.ones((2, 1)))
    with pytest.raises(DataError):
        ClusterData([1.0, 2.0], [[np.inf], [0.0]])


def test_dataset_requires_common_p():
    good = ClusterDataset.from_arrays([[1.0], [2.0, 3.0]], [np.ones((1, 2)), np.ones((2, 2))])
    assert good.p == 2 and good.n_clusters == 2 and good.n_total == 3
    with pytest.raises(DataError):
        ClusterDataset.from_arrays([[1.0], [2.0]], [np.ones((1, 2)), np.ones((1, 3))])


def test_dataset_immutability():
    ds = ClusterDataset.from_arrays([[1.0, 2.0]], [np.ones((2, 1))])
    with pytest.raises(ValueError):
        ds.clusters[0].y[0] = 5.0


def test_drop_cluster_and_digest(rng):
    ds = ClusterDataset.from_arrays(
        [rng.standard_normal(3) for _ in range(4)],
        [rng.standard_normal((3, 2)) for _ in range(4)],
    )
    smaller = ds.drop_cluster(1)
    assert smaller.n_clusters == 3
    assert np.array_equal(smaller.clusters[1].y, ds.clusters[2].y)
    assert ds.digest() == ds.digest()
    assert ds.digest() != smaller.digest()
    with pytest.raises(DataError):
        ds.drop_cluster(7)
