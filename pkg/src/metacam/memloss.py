"""Feature memory, memory-derived centroids, and the dynamic cross-entropy
(DCE) / dynamic symmetric cross-entropy (DSCE) losses.

Memory rows and centroids are constants from the point of view of the
encoder gradient; they only change through :meth:`FeatureMemory.update`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .clustering import PseudoLabeling
from .diffcore import Tensor


def _normalize_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero row")
    return M / norms


@dataclass
class FeatureMemory:
    W: np.ndarray
    alpha: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        W = np.array(self.W, dtype=np.float64)
        off = np.abs(np.linalg.norm(W, axis=1) - 1.0) > 1e-12
        if off.any():
            W[off] = _normalize_rows(W[off])
        self.W = W

    def __len__(self) -> int:
        return self.W.shape[0]

    def update(self, i: int, f) -> None:
        """``W[i] <- normalize(alpha W[i] + (1 - alpha) f)``."""
        if not 0 <= i < len(self):
            raise IndexError(f"memory index {i} out of range for {len(self)} rows")
        row = self.alpha * self.W[i] + (1.0 - self.alpha) * np.asarray(f, dtype=np.float64)
        norm = np.linalg.norm(row)
        if norm == 0:
            raise ValueError(f"memory row {i} collapsed to zero")
        self.W[i] = row / norm

    def update_rows(self, idx, F) -> None:
        for i, f in zip(idx, np.asarray(F)):
            self.update(int(i), f)

    def snapshot(self) -> np.ndarray:
        return self.W.copy()


@dataclass(frozen=True, eq=False)
class CentroidSet:
    C: np.ndarray
    counts: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.C.shape[0]


def build_centroids(mem: FeatureMemory | np.ndarray, p: PseudoLabeling, members=None) -> CentroidSet:
    """Normalized mean of the memory rows of each cluster.

    ``members`` optionally restricts which samples contribute (e.g. inliers
    only); every cluster must keep at least one member.
    """
    W = mem.W if isinstance(mem, FeatureMemory) else np.asarray(mem, dtype=np.float64)
    labels = p.labels
    keep = labels >= 0 if members is None else (np.asarray(members, dtype=bool) & (labels >= 0))
    lab = labels[keep]
    counts = np.bincount(lab, minlength=p.n_clusters)
    if counts.min(initial=1) < 1:
        raise ValueError("a cluster has no members to build a centroid from")
    sums = np.zeros((p.n_clusters, W.shape[1]))
    np.add.at(sums, lab, W[keep])
    return CentroidSet(_normalize_rows(sums / counts[:, None]), counts)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    dce_weight: float = 1.0
    dsce_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def _matrix(C) -> np.ndarray:
    return C.C if isinstance(C, CentroidSet) else np.asarray(C, dtype=np.float64)


def _one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError("label out of range for the centroid set")
    Y = np.zeros((labels.shape[0], n))
    Y[np.arange(labels.shape[0]), labels] = 1.0
    return Y


def log_target(n_clusters: int) -> tuple[float, float]:
    """log of the softmax-normalized one-hot target: (labeled entry, other entries)."""
    q = 1.0 / (n_clusters - 1 + math.e)
    return math.log(math.e * q), math.log(q)


def _logits(F, C, tau: float) -> Tensor:
    return dc.matmul(dc.as_tensor(F), dc.as_tensor(_matrix(C).T)) / tau


def dce_loss(F, labels, C, tau: float) -> Tensor:
    """Per-sample ``-log softmax(C f / tau)[y]`` as a length-n tensor."""
    logits = _logits(F, C, tau)
    Y = _one_hot(labels, logits.shape[1])
    return -dc.tsum(dc.log_softmax(logits) * Y, axis=1)


def dsce_loss(F, labels, C, tau: float) -> Tensor:
    """Per-sample ``-sum_j p_j log softmax(onehot(y))_j``; the target is constant."""
    logits = _logits(F, C, tau)
    Y = _one_hot(labels, logits.shape[1])
    on, off = log_target(logits.shape[1])
    log_y = Y * on + (1.0 - Y) * off
    return -dc.tsum(dc.softmax(logits) * log_y, axis=1)


def combined_loss(F, labels, C, cfg: LossConfig) -> Tensor:
    total = None
    if cfg.dce_weight:
        total = cfg.dce_weight * dce_loss(F, labels, C, cfg.tau)
    if cfg.dsce_weight:
        term = cfg.dsce_weight * dsce_loss(F, labels, C, cfg.tau)
        total = term if total is None else total + term
    if total is None:
        return dc.Tensor(np.zeros(np.atleast_2d(dc.as_tensor(F).value).shape[0]))
    return total


def _single(fn, f, y, C, tau) -> float:
    with dc.no_grad():
        return float(fn(np.asarray(f, dtype=np.float64)[None, :], [y], C, tau).value[0])


def l_dce(f, y: int, C, tau: float) -> float:
    return _single(dce_loss, f, y, C, tau)


def l_dsce(f, y: int, C, tau: float) -> float:
    return _single(dsce_loss, f, y, C, tau)


def l_c(f, y: int, C, cfg: LossConfig) -> float:
    with dc.no_grad():
        return float(combined_loss(np.asarray(f, dtype=np.float64)[None, :], [y], C, cfg).value[0])


def label_sums(f, C, tau: float, kind: str = "dsce") -> float:
    """Sum over every candidate label k of the per-sample loss for label k."""
    n = _matrix(C).shape[0]
    F = np.repeat(np.asarray(f, dtype=np.float64)[None, :], n, axis=0)
    fn = dsce_loss if kind == "dsce" else dce_loss
    with dc.no_grad():
        return float(fn(F, np.arange(n), C, tau).value.sum())


def check_noise_tolerance(f, C, tau: float) -> tuple[float, float]:
    """(observed sum of DSCE over all labels, closed form ``-1 - N_c log Q``)."""
    n = _matrix(C).shape[0]
    expected = -1.0 - n * math.log(1.0 / (n - 1 + math.e))
    return label_sums(f, C, tau, "dsce"), expected
