"""Extrinsic and coverage metrics for decomposed tensors."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from adagran import cpd
from adagran.sparse_tensor import AggregationMap, CooTensor

__all__ = [
    "LabelVector",
    "KMeansResult",
    "kmeans_rows",
    "nmi",
    "entropy_coverage",
    "aggregation_ratio",
    "nmi_pipeline",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LabelVector:
    """Hard community assignment with dense ids ``0..n_labels-1``."""

    assignments: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        if a.ndim != 1:
            raise ValueError("assignments must be one-dimensional")
        if a.size and (a.min() < 0 or np.unique(a).size != a.max() + 1):
            raise ValueError("label ids must be dense in 0..n_labels-1")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    @classmethod
    def from_labels(cls, labels: Sequence) -> "LabelVector":
        """Relabel arbitrary hashable labels densely, in sorted label order."""
        _, dense = np.unique(np.asarray(labels), return_inverse=True)
        return cls(dense.reshape(-1))

    @property
    def n_entities(self) -> int:
        return int(self.assignments.size)

    @property
    def n_labels(self) -> int:
        return int(self.assignments.max()) + 1 if self.assignments.size else 0

    def __eq__(self, other):
        return isinstance(other, LabelVector) and np.array_equal(
            self.assignments, other.assignments
        )

    def __hash__(self):
        return hash(self.assignments.tobytes())


# ---------------------------------------------------------------- k-means


@dataclass(frozen=True, eq=False)
class KMeansResult:
    labels: LabelVector
    centroids: np.ndarray
    wcss: float
    history: tuple[float, ...]


def _sq_dists(X, centroids):
    return ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _plusplus(X, k, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining points coincide with a chosen centre.
            c = int(rng.choice(np.setdiff1d(np.arange(n), centers)))
        else:
            c = int(rng.choice(n, p=d2 / total))
        centers.append(c)
        d2 = np.minimum(d2, ((X - X[c]) ** 2).sum(axis=1))
    return X[centers].astype(np.float64)


def _lloyd(X, centroids, max_iter, tol):
    history = []
    prev_labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, centroids)
        labels = np.argmin(d2, axis=1)
        counts = np.bincount(labels, minlength=centroids.shape[0])
        for c in np.flatnonzero(counts == 0):
            # Re-seed an empty cluster at the point farthest from its centre.
            far = int(np.argmax(d2[np.arange(X.shape[0]), labels]))
            labels[far] = c
            d2[far] = 0.0
            centroids[c] = X[far]
        history.append(float(d2[np.arange(X.shape[0]), labels].sum()))
        new = np.stack(
            [X[labels == c].mean(axis=0) for c in range(centroids.shape[0])]
        )
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if prev_labels is not None and np.array_equal(labels, prev_labels) and shift <= tol:
            break
        prev_labels = labels
    d2 = _sq_dists(X, centroids)
    labels = np.argmin(d2, axis=1)
    wcss = float(d2[np.arange(X.shape[0]), labels].sum())
    history.append(wcss)
    return labels, centroids, wcss, history


def kmeans_rows(
    F: np.ndarray,
    k: int,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 0.0,
    return_result: bool = False,
):
    """Cluster the rows of a factor matrix with k-means.

    Each restart seeds centroids with k-means++ and runs Lloyd iterations;
    the restart with the lowest within-cluster sum of squares wins (earliest
    restart on ties). Labels are renumbered by first appearance so that
    equal partitions compare equal.
    """
    X = np.asarray(F, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}, got {k}")
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.default_rng(child)
        labels, centroids, wcss, hist = _lloyd(X, _plusplus(X, k, rng), max_iter, tol)
        if best is None or wcss < best[2]:
            best = (labels, centroids, wcss, hist)
    labels, centroids, wcss, hist = best
    used, first = np.unique(labels, return_index=True)
    by_appearance = used[np.argsort(first)]
    remap = np.empty(k, dtype=np.int64)
    remap[by_appearance] = np.arange(by_appearance.size)
    lv = LabelVector(remap[labels])
    if return_result:
        return KMeansResult(lv, centroids[by_appearance], wcss, tuple(hist))
    return lv


# ---------------------------------------------------------------- NMI


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(
    a: LabelVector,
    b: LabelVector,
    average: Literal["arithmetic", "max", "min", "geometric", "joint"] = "arithmetic",
) -> float:
    """Normalized mutual information between two hard partitions.

    ``I(a; b)`` divided by the chosen mean of ``H(a)`` and ``H(b)``
    (``"joint"`` divides by ``H(a, b)``). Two single-cluster partitions score
    1; a single-cluster partition against any other scores 0.
    """
    x, y = np.asarray(a.assignments), np.asarray(b.assignments)
    if x.size != y.size:
        raise ValueError(f"label vectors differ in length: {x.size} vs {y.size}")
    n = x.size
    if n == 0:
        raise ValueError("empty label vectors")
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((xi.max() + 1, yi.max() + 1))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= n
    px, py = joint.sum(axis=1), joint.sum(axis=0)
    hx, hy = _entropy(px), _entropy(py)
    if average not in ("arithmetic", "max", "min", "geometric", "joint"):
        raise ValueError(f"unknown normalization {average!r}")
    nz = joint > 0
    # Same partition up to relabeling: I = H(a) = H(b) exactly, skip rounding.
    if nz.sum() == joint.shape[0] == joint.shape[1]:
        return 1.0
    mi = float((joint[nz] * np.log(joint[nz] / np.outer(px, py)[nz])).sum())
    if average == "arithmetic":
        denom = (hx + hy) / 2
    elif average == "max":
        denom = max(hx, hy)
    elif average == "min":
        denom = min(hx, hy)
    elif average == "geometric":
        denom = math.sqrt(hx * hy)
    else:
        denom = _entropy(joint.ravel())
    if denom == 0.0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


# ---------------------------------------------------------------- coverage


def entropy_coverage(f: cpd.KruskalFactors, mode: int, top_k: int = 3) -> float:
    """Entropy (bits) of the entities picked as top-``top_k`` across components.

    ``mode`` is 1 or 2. For every component the ``top_k`` entities with the
    largest absolute loading are picked (values equal to 12 significant
    digits tie, and ties go to the lower index). All picks are pooled with
    multiplicity and the Shannon entropy of the resulting empirical
    distribution is returned.
    """
    if mode not in (1, 2):
        raise ValueError("mode must be 1 or 2")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    F = f.A if mode == 1 else f.B
    n = F.shape[0]
    if top_k > n:
        warnings.warn(f"top_k={top_k} exceeds mode size {n}; clamped", RuntimeWarning)
        top_k = n
    picks = []
    for r in range(F.shape[1]):
        col = np.abs(F[:, r])
        peak = col.max()
        # Loadings equal up to rounding count as ties.
        key = np.round(col / peak, 12) if peak > 0 else col
        order = np.lexsort((np.arange(n), -key))
        picks.append(order[:top_k])
    counts = np.bincount(np.concatenate(picks), minlength=n).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def aggregation_ratio(w: AggregationMap) -> float:
    return w.K / w.K_star


# ---------------------------------------------------------------- pipeline


def nmi_pipeline(
    t: CooTensor,
    truth: LabelVector,
    mode: int,
    quality: cpd.QualityResult,
    seed: int = 0,
    als: Optional[cpd.AlsConfig] = None,
    restarts: int = 10,
    average: str = "arithmetic",
) -> dict:
    """Decompose at the chosen rank, cluster one mode's factor rows, score NMI.

    Returns a report fragment with ``nmi``, the rank used and the predicted
    labels.
    """
    if mode not in (1, 2):
        raise ValueError("mode must be 1 or 2")
    if truth.n_entities != t.shape[mode - 1]:
        raise ValueError(
            f"labels cover {truth.n_entities} entities but mode {mode} has {t.shape[mode - 1]}"
        )
    als = als or cpd.AlsConfig()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", cpd.IllConditionedWarning)
        f = cpd.cp_als(
            t, quality.best_rank, max_iters=als.max_iters, tol=als.tol,
            seed=als.seed, n_restarts=als.n_restarts,
        )
    F = f.A if mode == 1 else f.B
    k = min(truth.n_labels, F.shape[0])
    pred = kmeans_rows(F, k, seed=seed, restarts=restarts)
    return {
        "nmi": nmi(truth, pred, average=average),
        "rank": quality.best_rank,
        "mode": mode,
        "predicted": pred,
        "factors": f,
    }
