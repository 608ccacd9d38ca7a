"""Local structure scores for a (partially aggregated) slice.

Each utility maps a :class:`~adagran.sparse_tensor.SliceMatrix` to a scalar,
and :func:`should_aggregate` turns a pair of scores (the open aggregate and
the aggregate extended by one more slice) into an absorb-or-cut decision.

Graph utilities read a slice as a simple undirected graph: a nonzero at
``(i, j)`` with ``i != j`` is the edge ``{i, j}``; diagonal entries, values
and edge multiplicity are ignored.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit

from adagran.sparse_tensor import SliceMatrix

__all__ = [
    "UtilityKind",
    "SgdConfig",
    "UtilityConfig",
    "UtilityValue",
    "UtilityError",
    "frobenius_norm",
    "two_norm",
    "infinity_norm",
    "reconstruction_rank",
    "missing_value_rmse",
    "average_degree",
    "connected_components_gt1",
    "evaluate",
    "should_aggregate",
]

# Guards the relative-change denominator when the previous value is zero.
REL_EPS = 1e-12


class UtilityError(ArithmeticError):
    """A utility could not be computed (e.g. iterative SVD did not converge)."""


class UtilityKind(enum.Enum):
    FROBENIUS = "frobenius"
    TWO_NORM = "two-norm"
    INF_NORM = "inf-norm"
    RANK = "rank"
    MISSING_VALUE = "mvp"
    AVG_DEGREE = "avg-degree"
    COMPONENTS = "components"

    @classmethod
    def parse(cls, name: "str | UtilityKind") -> "UtilityKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            raise ValueError(
                f"unknown utility {name!r}; choose from {[k.value for k in cls]}"
            ) from None


@dataclass(frozen=True)
class SgdConfig:
    """Matrix-factorization settings for the missing-value utility.

    ``rank=None`` picks the factor rank from the slice's reconstruction rank.
    """

    rank: Optional[int] = None
    learning_rate: float = 0.01
    regularization: float = 0.02
    epochs: int = 200

    def __post_init__(self):
        if self.rank is not None and self.rank < 1:
            raise ValueError("sgd rank must be >= 1")
        if self.epochs < 1:
            raise ValueError("sgd epochs must be >= 1")
        if self.learning_rate <= 0 or self.regularization < 0:
            raise ValueError("sgd learning rate must be > 0 and regularization >= 0")


@dataclass(frozen=True)
class UtilityConfig:
    threshold: float = 0.1
    energy_fraction: float = 0.95
    holdout_fraction: float = 0.2
    sgd: SgdConfig = field(default_factory=SgdConfig)
    rng_seed: int = 0
    # Compacted slices with more cells than this use iterative SVD for the 2-norm.
    dense_cutoff: int = 250_000
    power_tol: float = 1e-8
    power_max_iter: int = 10_000

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if not 0 < self.energy_fraction <= 1:
            raise ValueError("energy_fraction must lie in (0, 1]")
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "energy_fraction": self.energy_fraction,
            "holdout_fraction": self.holdout_fraction,
            "sgd": {
                "rank": self.sgd.rank,
                "learning_rate": self.sgd.learning_rate,
                "regularization": self.sgd.regularization,
                "epochs": self.sgd.epochs,
            },
            "rng_seed": self.rng_seed,
            "dense_cutoff": self.dense_cutoff,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UtilityConfig":
        d = dict(d)
        sgd = SgdConfig(**d.pop("sgd", {}))
        d.pop("power_tol", None)
        d.pop("power_max_iter", None)
        return cls(sgd=sgd, **d)


@dataclass(frozen=True)
class UtilityValue:
    """Score of one slice.

    ``evaluable`` is False when the utility cannot measure the slice at all
    (the missing-value utility on a slice too small to hide a cell). A
    non-evaluable open aggregate absorbs the next slice, while a non-evaluable
    candidate never does. ``nnz`` records the slice size so the
    empty-aggregate rule in :func:`should_aggregate` needs no extra lookup.
    """

    scalar: float
    kind: UtilityKind
    nnz: int = 0
    evaluable: bool = True


# ---------------------------------------------------------------- norms


def frobenius_norm(m: SliceMatrix) -> UtilityValue:
    return UtilityValue(float(np.sqrt(np.dot(m.vals, m.vals))), UtilityKind.FROBENIUS, m.nnz)


def _power_two_norm(m: SliceMatrix, tol: float, max_iter: int) -> float:
    a = m.to_scipy()
    rng = np.random.default_rng(0)
    x = rng.random(a.shape[1]) + 0.5
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = a.T @ (a @ x)
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
        new_sigma = math.sqrt(lam)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma
        sigma = new_sigma
    raise UtilityError(
        f"2-norm power iteration did not converge in {max_iter} steps "
        f"for slice range {m.source_range}"
    )


def two_norm(m: SliceMatrix, cfg: Optional[UtilityConfig] = None) -> UtilityValue:
    """Largest singular value of the slice."""
    cfg = cfg or UtilityConfig()
    if m.nnz == 0:
        return UtilityValue(0.0, UtilityKind.TWO_NORM, 0)
    dense = m.compact_dense()
    if dense.size <= cfg.dense_cutoff:
        try:
            sigma = float(np.linalg.norm(dense, ord=2))
        except np.linalg.LinAlgError as exc:
            raise UtilityError(f"SVD failed for slice range {m.source_range}") from exc
    else:
        sigma = _power_two_norm(m, cfg.power_tol, cfg.power_max_iter)
    return UtilityValue(sigma, UtilityKind.TWO_NORM, m.nnz)


def infinity_norm(m: SliceMatrix) -> UtilityValue:
    """Maximum absolute row sum."""
    if m.nnz == 0:
        return UtilityValue(0.0, UtilityKind.INF_NORM, 0)
    sums = np.bincount(m.rows, weights=np.abs(m.vals))
    return UtilityValue(float(sums.max()), UtilityKind.INF_NORM, m.nnz)


# ---------------------------------------------------------------- rank


def _singular_values(m: SliceMatrix) -> np.ndarray:
    try:
        return np.linalg.svd(m.compact_dense(), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise UtilityError(f"SVD failed for slice range {m.source_range}") from exc


def _energy_rank(s: np.ndarray, energy_fraction: float) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    s = s[s > 1e-10 * s[0]]
    energy = np.cumsum(s**2)
    # Relative slack so fraction 1.0 is not defeated by summation rounding.
    target = energy_fraction * energy[-1] * (1.0 - 1e-12)
    return int(np.searchsorted(energy, target, side="left")) + 1


def reconstruction_rank(m: SliceMatrix, energy_fraction: float = 0.95) -> UtilityValue:
    """Smallest r whose top-r squared singular values reach the energy fraction."""
    if not 0 < energy_fraction <= 1:
        raise ValueError("energy_fraction must lie in (0, 1]")
    if m.nnz == 0:
        return UtilityValue(0.0, UtilityKind.RANK, 0)
    r = _energy_rank(_singular_values(m), energy_fraction)
    return UtilityValue(float(r), UtilityKind.RANK, m.nnz)


# ---------------------------------------------------------------- missing values


@njit(cache=True)
def _sgd_fit(rows, cols, vals, order, U, V, lr, reg):
    for t in range(order.shape[0]):
        e = order[t]
        i = rows[e]
        j = cols[e]
        err = vals[e]
        for f in range(U.shape[1]):
            err -= U[i, f] * V[j, f]
        for f in range(U.shape[1]):
            u = U[i, f]
            v = V[j, f]
            U[i, f] += lr * (err * v - reg * u)
            V[j, f] += lr * (err * u - reg * v)


def _slice_rng(cfg: UtilityConfig, m: SliceMatrix) -> np.random.Generator:
    s, e = m.source_range
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, s, e]))


def _sample_zero_cells(m: SliceMatrix, count: int, rng: np.random.Generator) -> np.ndarray:
    I, J = m.shape
    total = I * J
    occupied = m.rows * J + m.cols
    n_zero = total - occupied.size
    count = min(count, n_zero)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if n_zero <= 4 * count or total <= 1_000_000:
        free = np.setdiff1d(np.arange(total, dtype=np.int64), occupied, assume_unique=True)
        return np.sort(rng.choice(free, size=count, replace=False))
    picked = np.zeros(0, dtype=np.int64)
    while picked.size < count:
        draw = rng.integers(0, total, size=2 * (count - picked.size))
        draw = np.setdiff1d(draw, occupied)
        picked = np.union1d(picked, draw)
    return np.sort(rng.permutation(picked)[:count])


def missing_value_rmse(m: SliceMatrix, cfg: Optional[UtilityConfig] = None) -> UtilityValue:
    """Hidden-cell RMSE of an SGD matrix factorization fitted to the slice.

    The observed set is every nonzero plus an equal number of zero cells
    drawn uniformly at random. A ``holdout_fraction`` share of that set is
    hidden, the factorization is fitted on the rest, and the RMSE over the
    hidden cells is returned. The random draws are seeded from
    ``(cfg.rng_seed, source_range)`` so repeated calls are bit-identical.

    Slices with no nonzeros, or too small to both hide and keep a cell,
    return a non-evaluable value.
    """
    cfg = cfg or UtilityConfig()
    kind = UtilityKind.MISSING_VALUE
    if m.nnz == 0:
        return UtilityValue(0.0, kind, 0, evaluable=False)
    rng = _slice_rng(cfg, m)
    I, J = m.shape
    zeros = _sample_zero_cells(m, m.nnz, rng)
    rows = np.concatenate([m.rows, zeros // J])
    cols = np.concatenate([m.cols, zeros % J])
    vals = np.concatenate([m.vals, np.zeros(zeros.size)])
    n_obs = vals.size
    n_hidden = int(math.floor(cfg.holdout_fraction * n_obs))
    if n_hidden < 1 or n_hidden >= n_obs:
        return UtilityValue(0.0, kind, m.nnz, evaluable=False)

    perm = rng.permutation(n_obs)
    hidden, visible = perm[:n_hidden], perm[n_hidden:]

    rank = cfg.sgd.rank
    if rank is None:
        rank = max(1, int(reconstruction_rank(m, cfg.energy_fraction).scalar))
    scale = float(np.sqrt(np.abs(m.vals).mean() / rank))
    U = rng.uniform(0.0, 1.0, size=(I, rank)) * scale
    V = rng.uniform(0.0, 1.0, size=(J, rank)) * scale
    vr, vc, vv = rows[visible], cols[visible], vals[visible]
    for _ in range(cfg.sgd.epochs):
        order = rng.permutation(visible.size)
        _sgd_fit(vr, vc, vv, order, U, V, cfg.sgd.learning_rate, cfg.sgd.regularization)
    hr, hc = rows[hidden], cols[hidden]
    pred = np.einsum("ij,ij->i", U[hr], V[hc])
    rmse = float(np.sqrt(np.mean((vals[hidden] - pred) ** 2)))
    if not math.isfinite(rmse):
        raise UtilityError(f"SGD diverged for slice range {m.source_range}")
    return UtilityValue(rmse, kind, m.nnz)


# ---------------------------------------------------------------- graph


def _edges(m: SliceMatrix) -> np.ndarray:
    off = m.rows != m.cols
    lo = np.minimum(m.rows[off], m.cols[off])
    hi = np.maximum(m.rows[off], m.cols[off])
    if lo.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.column_stack([lo, hi]), axis=0)


def average_degree(m: SliceMatrix) -> UtilityValue:
    """``2|E| / |V_active|`` over the symmetrized, unweighted slice graph."""
    edges = _edges(m)
    if edges.shape[0] == 0:
        return UtilityValue(0.0, UtilityKind.AVG_DEGREE, m.nnz)
    n_active = np.unique(edges).size
    return UtilityValue(2.0 * edges.shape[0] / n_active, UtilityKind.AVG_DEGREE, m.nnz)


def _find(parent: dict, x: int) -> int:
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def connected_components_gt1(m: SliceMatrix) -> UtilityValue:
    """Number of connected components with at least two vertices."""
    parent: dict[int, int] = {}
    for a, b in _edges(m).tolist():
        parent.setdefault(a, a)
        parent.setdefault(b, b)
        ra, rb = _find(parent, a), _find(parent, b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    # Every vertex in ``parent`` has an incident edge, so each root is a component of size >= 2.
    n = sum(1 for v in parent if _find(parent, v) == v)
    return UtilityValue(float(n), UtilityKind.COMPONENTS, m.nnz)


# ---------------------------------------------------------------- dispatch


_DISPATCH: dict[UtilityKind, Callable[[SliceMatrix, UtilityConfig], UtilityValue]] = {
    UtilityKind.FROBENIUS: lambda m, cfg: frobenius_norm(m),
    UtilityKind.TWO_NORM: two_norm,
    UtilityKind.INF_NORM: lambda m, cfg: infinity_norm(m),
    UtilityKind.RANK: lambda m, cfg: reconstruction_rank(m, cfg.energy_fraction),
    UtilityKind.MISSING_VALUE: missing_value_rmse,
    UtilityKind.AVG_DEGREE: lambda m, cfg: average_degree(m),
    UtilityKind.COMPONENTS: lambda m, cfg: connected_components_gt1(m),
}


def evaluate(kind: UtilityKind, m: SliceMatrix, cfg: UtilityConfig) -> UtilityValue:
    return _DISPATCH[UtilityKind.parse(kind)](m, cfg)


def should_aggregate(
    kind: UtilityKind, prev: UtilityValue, curr: UtilityValue, cfg: UtilityConfig
) -> bool:
    """Decide whether the candidate slice is absorbed into the open aggregate.

    ``prev`` scores the open aggregate, ``curr`` the aggregate extended by the
    candidate slice. An empty or non-evaluable open aggregate always absorbs
    (it carries no evidence of having stabilized); a non-evaluable candidate
    after an evaluable aggregate cuts. Otherwise:

    * norms and average degree absorb while the relative change is at least
      ``cfg.threshold``;
    * rank absorbs while it does not decrease;
    * missing-value RMSE absorbs while it improves by at least
      ``cfg.threshold`` relative to ``prev``;
    * component count absorbs while it does not increase.
    """
    kind = UtilityKind.parse(kind)
    if prev.kind is not kind or curr.kind is not kind:
        raise ValueError(f"utility kind mismatch: {prev.kind}, {curr.kind} under {kind}")
    if prev.nnz == 0 or not prev.evaluable:
        return True
    if not curr.evaluable:
        return False
    p, c = prev.scalar, curr.scalar
    if kind is UtilityKind.RANK:
        return c >= p
    if kind is UtilityKind.COMPONENTS:
        return c <= p
    if kind is UtilityKind.MISSING_VALUE:
        return c <= p - cfg.threshold * p
    return abs(c - p) / max(abs(p), REL_EPS) >= cfg.threshold
