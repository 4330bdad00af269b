"""Containers for clustered data.

A *cluster* is an independent group of correlated observations (a subject,
market, district, ...).  All estimation, resampling and variance
calculations in this package treat the cluster as the unit of
independence.  Within-cluster row order is meaningful: serial working
correlation structures (AR, ARMA) index observations by their position in
the cluster.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _frozen_array(values, dtype=float):
    out = np.array(values, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One cluster: response vector ``y`` (n,) and covariate matrix ``x`` (n, p).

    A one-dimensional ``x`` is promoted to a single-column matrix.  All
    entries must be finite; instances are immutable after construction.
    """

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = _frozen_array(self.y)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DataError("cluster covariates must form a 2-d matrix")
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if y.ndim != 1 or y.size < 1:
            raise DataError("cluster response must be a nonempty vector")
        if x.shape[0] != y.size:
            raise DataError(
                f"covariate rows ({x.shape[0]}) do not match response length ({y.size})"
            )
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise DataError("cluster contains non-finite entries")

    @property
    def n(self):
        """Group size n_i."""
        return self.y.size

    @property
    def p(self):
        """Covariate dimension."""
        return self.x.shape[1]


@dataclass(frozen=True, eq=False)
class ClusterDataset:
    """An ordered collection of clusters sharing one covariate dimension."""

    clusters: tuple

    def __post_init__(self):
        clusters = tuple(
            c if isinstance(c, ClusterData) else ClusterData(*c) for c in self.clusters
        )
        object.__setattr__(self, "clusters", clusters)
        if len(clusters) < 1:
            raise DataError("a dataset needs at least one cluster")
        p = clusters[0].p
        for i, c in enumerate(clusters):
            if c.p != p:
                raise DataError(
                    f"cluster {i} has {c.p} covariates, expected {p} as in cluster 0"
                )

    @classmethod
    def from_arrays(cls, ys, xs):
        """Build a dataset from parallel sequences of responses and designs."""
        return cls(tuple(ClusterData(y, x) for y, x in zip(ys, xs)))

    @property
    def p(self):
        return self.clusters[0].p

    @property
    def n_clusters(self):
        return len(self.clusters)

    @property
    def n_total(self):
        return sum(c.n for c in self.clusters)

    @property
    def group_sizes(self):
        return tuple(c.n for c in self.clusters)

    @property
    def max_group_size(self):
        return max(self.group_sizes)

    def drop_cluster(self, i):
        """Dataset with cluster ``i`` removed (for exact leave-one-out refits)."""
        if not 0 <= i < self.n_clusters:
            raise DataError(f"cluster index {i} out of range")
        kept = self.clusters[:i] + self.clusters[i + 1 :]
        return ClusterDataset(kept)

    def digest(self):
        """SHA-256 over all shapes and raw bytes; stable dataset fingerprint."""
        h = hashlib.sha256()
        for c in self.clusters:
            h.update(np.asarray(c.y.shape, dtype=np.int64).tobytes())
            h.update(c.y.tobytes())
            h.update(np.asarray(c.x.shape, dtype=np.int64).tobytes())
            h.update(c.x.tobytes())
        return h.hexdigest()
