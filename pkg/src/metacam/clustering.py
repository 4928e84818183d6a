"""Pseudo-label mining: Euclidean distances, k-reciprocal Jaccard distances,
density-based clustering on the precomputed matrix, and outlier assignment.

Ties are broken by lowest sample index throughout, except that a k-nearest
neighbour list keeps every sample tied with the k-th distance (see
:func:`knn_sets`).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

EPS_FLOOR = 1e-9


class NoInliersError(RuntimeError):
    """Clustering left every sample as an outlier."""


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    values: np.ndarray
    kind: str = "euclidean"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if self.kind not in ("euclidean", "jaccard"):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if not np.allclose(v, v.T, rtol=0, atol=1e-9):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diag(v) != 0) or np.any(v < 0):
            raise ValueError("distance matrix needs a zero diagonal and nonnegative entries")
        if self.kind == "jaccard" and np.any(v > 1):
            raise ValueError("jaccard distances must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class PseudoLabeling:
    """Cluster index per sample; ``-1`` marks an unassigned outlier."""

    labels: np.ndarray
    inlier_mask: np.ndarray
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        mask = np.asarray(self.inlier_mask, dtype=bool)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "inlier_mask", mask)
        if labels.shape != mask.shape:
            raise ValueError("labels and inlier_mask differ in length")
        if labels.size and (labels.max(initial=-1) >= self.n_clusters or labels.min() < -1):
            raise ValueError("label out of range")
        assigned = labels[labels >= 0]
        if self.n_clusters and np.bincount(assigned, minlength=self.n_clusters).min() < 1:
            raise ValueError("every cluster needs at least one member")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def complete(self) -> bool:
        return bool(np.all(self.labels >= 0))

    @property
    def inlier_fraction(self) -> float:
        return float(self.inlier_mask.mean()) if len(self) else 0.0

    @classmethod
    def exemplars(cls, n: int) -> PseudoLabeling:
        """Every sample its own cluster."""
        return cls(np.arange(n), np.ones(n, dtype=bool), n)


@dataclass(frozen=True)
class MiningParams:
    k1: int | None = None  # None: min(20, ceil(N / 10))
    eps: float | None = None  # None: percentile of off-diagonal Jaccard distances
    eps_percentile: float = 1.6
    min_pts: int = 4
    jaccard_variant: str = "basic"  # basic | expanded
    outlier_metric: str = "jaccard"  # jaccard | euclidean

    def __post_init__(self):
        if self.jaccard_variant not in ("basic", "expanded"):
            raise ValueError(f"unknown jaccard_variant {self.jaccard_variant!r}")
        if self.outlier_metric not in ("jaccard", "euclidean"):
            raise ValueError(f"unknown outlier_metric {self.outlier_metric!r}")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.eps_percentile <= 100:
            raise ValueError("eps_percentile must lie in [0, 100]")

    def resolve_k1(self, n: int) -> int:
        return self.k1 if self.k1 is not None else max(1, min(20, math.ceil(n / 10)))


def pairwise_euclidean(F, block: int = 256) -> DistanceMatrix:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or not np.isfinite(F).all():
        raise ValueError("features must be a finite 2-D array")
    n = F.shape[0]
    out = np.empty((n, n))
    for start in range(0, n, block):
        diff = F[start : start + block, None, :] - F[None, :, :]
        out[start : start + block] = np.sqrt((diff * diff).sum(axis=-1))
    return DistanceMatrix(out, "euclidean")


def knn_sets(D: np.ndarray, k: int) -> np.ndarray:
    """Boolean matrix with ``out[i, j]`` true when j is among i's k nearest
    other samples.  Samples tied with the k-th distance are all kept, so
    exact duplicates always see each other symmetrically."""
    n = D.shape[0]
    masked = D.copy()
    np.fill_diagonal(masked, np.inf)
    kth = np.partition(masked, k - 1, axis=1)[:, k - 1]
    out = masked <= kth[:, None]
    np.fill_diagonal(out, False)
    return out


def reciprocal_sets(D: np.ndarray, k: int) -> np.ndarray:
    """``R[i, j]``: j is a k-reciprocal neighbour of i (i is in its own set)."""
    K = knn_sets(D, k)
    R = K & K.T
    np.fill_diagonal(R, True)
    return R


def _expand(D: np.ndarray, R: np.ndarray, k1: int) -> np.ndarray:
    half = reciprocal_sets(D, max(1, int(round(k1 / 2))))
    out = R.copy()
    for i in range(R.shape[0]):
        for q in np.flatnonzero(R[i]):
            cand = half[q]
            if np.count_nonzero(cand & R[i]) > (2.0 / 3.0) * np.count_nonzero(cand):
                out[i] |= cand
    return out


def jaccard_from_sets(R: np.ndarray) -> np.ndarray:
    Rf = R.astype(np.float64)
    inter = Rf @ Rf.T
    sizes = Rf.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    J = 1.0 - inter / union
    np.fill_diagonal(J, 0.0)
    return J


def k_reciprocal_jaccard(D: DistanceMatrix, k1: int, variant: str = "basic") -> DistanceMatrix:
    n = len(D)
    if not 1 <= k1 < n:
        raise ValueError(f"k1 must satisfy 1 <= k1 < N={n}, got {k1}")
    R = reciprocal_sets(D.values, k1)
    if variant == "expanded":
        R = _expand(D.values, R, k1)
    elif variant != "basic":
        raise ValueError(f"unknown jaccard variant {variant!r}")
    return DistanceMatrix(jaccard_from_sets(R), "jaccard")


def dbscan(D: DistanceMatrix, eps: float, min_pts: int) -> PseudoLabeling:
    """Density-based clustering on a precomputed matrix.

    Neighbourhoods are ``D <= eps`` with the point itself counted.  Clusters
    are grown breadth-first from the lowest-index unvisited core point, so a
    border point reachable from several clusters joins the one that was
    started first.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    neigh = D.values <= eps
    n = len(D)
    core = neigh.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] >= 0 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(neigh[p]):
                if labels[q] < 0:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return PseudoLabeling(labels, labels >= 0, cluster)


def assign_outliers(D: DistanceMatrix, p: PseudoLabeling) -> PseudoLabeling:
    """Give each outlier the label of its nearest inlier (lowest index on ties)."""
    inliers = np.flatnonzero(p.labels >= 0)
    if inliers.size == 0:
        raise NoInliersError("no inliers to assign outliers to")
    outliers = np.flatnonzero(p.labels < 0)
    if outliers.size == 0:
        return p
    labels = p.labels.copy()
    nearest = np.argmin(D.values[np.ix_(outliers, inliers)], axis=1)
    labels[outliers] = p.labels[inliers[nearest]]
    return PseudoLabeling(labels, p.inlier_mask.copy(), p.n_clusters)


def resolve_eps(J: DistanceMatrix, params: MiningParams) -> float:
    if params.eps is not None:
        return params.eps
    n = len(J)
    if n < 2:
        return 1.0
    off = J.values[np.triu_indices(n, k=1)]
    return max(float(np.percentile(off, params.eps_percentile)), EPS_FLOOR)


def mine_labels(F, params: MiningParams = MiningParams()) -> PseudoLabeling:
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[0]
    if n == 1:
        return PseudoLabeling(np.zeros(1, dtype=np.int64), np.ones(1, dtype=bool), 1)
    D = pairwise_euclidean(F)
    J = k_reciprocal_jaccard(D, params.resolve_k1(n), params.jaccard_variant)
    raw = dbscan(J, resolve_eps(J, params), params.min_pts)
    return assign_outliers(J if params.outlier_metric == "jaccard" else D, raw)


def canonicalize(labels) -> np.ndarray:
    """Relabel to 0..K-1 in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].astype(np.int64)


def inject_label_noise(p: PseudoLabeling, rate: float, rng: np.random.Generator) -> PseudoLabeling:
    """Symmetric noise: each label is replaced, with probability ``rate``,
    by a uniformly drawn different cluster.  Empty clusters are dropped."""
    if rate <= 0 or p.n_clusters < 2:
        return p
    labels = p.labels.copy()
    flip = rng.random(len(labels)) < rate
    shift = rng.integers(1, p.n_clusters, size=len(labels))
    labels[flip] = (labels[flip] + shift[flip]) % p.n_clusters
    labels = canonicalize(labels)
    return replace(p, labels=labels, n_clusters=int(labels.max()) + 1)


def dump_labeling(p: PseudoLabeling, path: str | Path) -> None:
    """Write ``index label inlier`` rows, one per sample."""
    with open(path, "w") as fh:
        fh.write("index\tlabel\tinlier\n")
        for i, (lab, inl) in enumerate(zip(p.labels, p.inlier_mask)):
            fh.write(f"{i}\t{int(lab)}\t{int(bool(inl))}\n")
