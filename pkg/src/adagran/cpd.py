"""CP decomposition of sparse tensors, core consistency, and rank search.

The ALS solver never densifies the data: the matricized-tensor times
Khatri-Rao product (MTTKRP) for each mode is a sparse scatter of per-nonzero
row products.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from scipy import sparse

from adagran.sparse_tensor import CooTensor

__all__ = [
    "AlsConfig",
    "KruskalFactors",
    "QualityConfig",
    "QualityResult",
    "RankRow",
    "NumericalError",
    "cp_als",
    "corcondia",
    "quality_search",
    "reconstruct",
    "cp_fit",
]

log = logging.getLogger(__name__)

# Gram matrices with a larger condition number get a ridge term.
GRAM_COND_LIMIT = 1e12
RIDGE_SCALE = 1e-10


class NumericalError(ArithmeticError):
    """NaN/Inf or another unrecoverable numerical failure."""


class IllConditionedWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class AlsConfig:
    max_iters: int = 200
    tol: float = 1e-8
    n_restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.n_restarts < 1:
            raise ValueError("max_iters and n_restarts must be >= 1")


@dataclass(frozen=True, eq=False)
class KruskalFactors:
    """CP model ``sum_r weights[r] * A[:, r] o B[:, r] o C[:, r]``.

    Factor columns have unit 2-norm; their scale lives in ``weights``.
    ``fit`` and ``fit_history`` are filled in by :func:`cp_als`.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    weights: np.ndarray
    fit: float = float("nan")
    fit_history: tuple[float, ...] = ()

    @property
    def rank(self) -> int:
        return int(self.weights.size)

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.A, self.B, self.C

    @classmethod
    def from_unnormalized(cls, A, B, C, **kw) -> "KruskalFactors":
        weights = np.ones(np.asarray(A).shape[1])
        mats = []
        for M in (A, B, C):
            M = np.array(M, dtype=np.float64)
            norms = np.linalg.norm(M, axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            mats.append(M / safe)
            weights = weights * norms
        return cls(*mats, weights=weights, **kw)

    def permuted(self, order) -> "KruskalFactors":
        order = np.asarray(order)
        return replace(
            self, A=self.A[:, order], B=self.B[:, order], C=self.C[:, order],
            weights=self.weights[order],
        )


def reconstruct(f: KruskalFactors) -> np.ndarray:
    """Dense reconstruction (for tests and small tensors)."""
    return np.einsum("r,ir,jr,kr->ijk", f.weights, f.A, f.B, f.C)


class _SparseModes:
    """Per-mode scatter matrices ``S_n`` with ``S_n[idx_n[e], e] = v_e``."""

    def __init__(self, t: CooTensor):
        self.idx = [t.subs[:, n] for n in range(3)]
        cols = np.arange(t.nnz)
        self.scatter = [
            sparse.csr_matrix((t.vals, (self.idx[n], cols)), shape=(t.shape[n], t.nnz))
            for n in range(3)
        ]
        self.norm_sq = float(np.dot(t.vals, t.vals))

    def mttkrp(self, factors, mode: int) -> np.ndarray:
        others = [n for n in range(3) if n != mode]
        kr = factors[others[0]][self.idx[others[0]]] * factors[others[1]][self.idx[others[1]]]
        return np.asarray(self.scatter[mode] @ kr)


def _solve_gram(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Solve ``gram @ X = rhs`` with a ridge fallback for near-singular ``gram``."""
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
        lam = RIDGE_SCALE * max(float(np.trace(gram)), np.finfo(float).tiny)
        log.debug("%s: Gram cond=%.3g, ridge %.3g", what, cond, lam)
        warnings.warn(
            f"{what}: ill-conditioned Gram matrix, ridge term applied",
            IllConditionedWarning,
            stacklevel=3,
        )
        gram = gram + lam * np.eye(gram.shape[0])
    return np.linalg.solve(gram, rhs)


def _normalize(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(M, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return M / safe, norms


def _model_fit(data: _SparseModes, factors, weights, mttkrp_last) -> float:
    A, B, C = factors
    if data.norm_sq == 0:
        return 1.0
    Cw = C * weights
    inner = float(np.sum(mttkrp_last * Cw))
    model_sq = float(np.sum((A.T @ A) * (B.T @ B) * (Cw.T @ Cw)))
    resid_sq = max(data.norm_sq - 2 * inner + model_sq, 0.0)
    return 1.0 - np.sqrt(resid_sq) / np.sqrt(data.norm_sq)


def _als_once(data: _SparseModes, shape, R: int, cfg: AlsConfig, rng) -> KruskalFactors:
    factors = [rng.uniform(0.0, 1.0, size=(shape[n], R)) for n in range(3)]
    factors = [_normalize(F)[0] for F in factors]
    weights = np.ones(R)
    history: list[float] = []
    fit_old = -np.inf
    for _ in range(cfg.max_iters):
        for mode in range(3):
            M = data.mttkrp(factors, mode)
            gram = np.ones((R, R))
            for n in range(3):
                if n != mode:
                    gram *= factors[n].T @ factors[n]
            F = _solve_gram(gram, M.T, f"ALS mode {mode}").T
            if not np.all(np.isfinite(F)):
                raise NumericalError(f"non-finite values in ALS update of mode {mode}")
            factors[mode], weights = _normalize(F)
        fit = _model_fit(data, factors, weights, M)
        history.append(fit)
        if abs(fit - fit_old) < cfg.tol:
            break
        fit_old = fit
    return KruskalFactors(*factors, weights=weights, fit=fit, fit_history=tuple(history))


def cp_als(
    t: CooTensor,
    R: int,
    max_iters: int = 200,
    tol: float = 1e-8,
    seed: int = 0,
    n_restarts: int = 1,
) -> KruskalFactors:
    """Rank-``R`` CP decomposition by alternating least squares.

    Factors start from seeded uniform random entries. Each sweep updates
    A, B and C in turn and folds column norms into ``weights``; iteration
    stops once the fit changes by less than ``tol``. With several restarts
    the best-fitting run is kept (earliest on ties).
    """
    if R < 1:
        raise ValueError("rank must be >= 1")
    if t.nnz == 0:
        raise ValueError("cannot decompose an empty tensor")
    cfg = AlsConfig(max_iters=max_iters, tol=tol, n_restarts=n_restarts, seed=seed)
    data = _SparseModes(t)
    best = None
    for child in np.random.SeedSequence(seed).spawn(cfg.n_restarts):
        f = _als_once(data, t.shape, R, cfg, np.random.default_rng(child))
        if best is None or f.fit > best.fit:
            best = f
    return best


def cp_fit(t: CooTensor, f: KruskalFactors) -> float:
    """``1 - ||X - Xhat||_F / ||X||_F`` computed without densifying ``X``."""
    data = _SparseModes(t)
    M = data.mttkrp(f.factors, 2)
    return _model_fit(data, f.factors, f.weights, M)


def _pinv(F: np.ndarray, what: str) -> np.ndarray:
    return _solve_gram(F.T @ F, F.T, what)


def corcondia(t: CooTensor, f: KruskalFactors, chunk: int = 20_000) -> float:
    """Core consistency of ``f`` as a model of ``t``, in percent (at most 100).

    Weights are folded into the third factor, the least-squares Tucker core
    ``G = X x1 pinv(A) x2 pinv(B) x3 pinv(C)`` is fitted one mode at a time,
    and the score is ``100 * (1 - sum((G - I)**2) / R)`` where ``I`` is the
    superdiagonal identity core.
    """
    A, B, C = f.A, f.B, f.C * f.weights
    if (A.shape[0], B.shape[0], C.shape[0]) != t.shape:
        raise ValueError(f"factor sizes do not match tensor shape {t.shape}")
    R = f.rank
    Ap, Bp, Cp = (_pinv(M, f"core fit mode {n}") for n, M in enumerate((A, B, C)))
    core = np.zeros((R, R, R))
    i, j, k = t.subs.T
    for lo in range(0, t.nnz, chunk):
        sl = slice(lo, lo + chunk)
        left = Ap[:, i[sl]] * t.vals[sl]
        core += np.einsum("pn,qn,rn->pqr", left, Bp[:, j[sl]], Cp[:, k[sl]], optimize=True)
    if not np.all(np.isfinite(core)):
        raise NumericalError("non-finite core tensor")
    target = np.zeros((R, R, R))
    target[np.arange(R), np.arange(R), np.arange(R)] = 1.0
    return float(100.0 * (1.0 - np.sum((core - target) ** 2) / R))


# ---------------------------------------------------------------- rank search


@dataclass(frozen=True)
class QualityConfig:
    """Settings for :func:`quality_search`.

    ``policy="argmax"`` picks the rank with the highest core consistency
    (ties to the smaller rank). Rank 1 always scores 100, so in practice this
    favours the smallest ranks.

    ``policy="consistent"`` walks up from rank 1 and accepts rank R while its
    core consistency is at least ``min_corcondia`` and it explains a relative
    share of at least ``min_fit_gain`` of its own fit beyond rank R-1, i.e.
    ``(fit[R] - fit[R-1]) / fit[R] >= min_fit_gain``. The last accepted rank
    wins. The gain test matters for block-structured data, where splitting a
    block into two components leaves the core diagonal.
    """

    R_max: int = 10
    als: AlsConfig = field(default_factory=AlsConfig)
    policy: Literal["consistent", "argmax"] = "consistent"
    min_corcondia: float = 80.0
    min_fit_gain: float = 0.15

    def __post_init__(self):
        if self.R_max < 1:
            raise ValueError("R_max must be >= 1")
        if self.policy not in ("consistent", "argmax"):
            raise ValueError(f"unknown rank policy {self.policy!r}")

    def to_dict(self) -> dict:
        return {
            "R_max": self.R_max,
            "policy": self.policy,
            "min_corcondia": self.min_corcondia,
            "min_fit_gain": self.min_fit_gain,
            "als": {
                "max_iters": self.als.max_iters,
                "tol": self.als.tol,
                "n_restarts": self.als.n_restarts,
                "seed": self.als.seed,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityConfig":
        d = dict(d)
        als = AlsConfig(**d.pop("als", {}))
        return cls(als=als, **d)


@dataclass(frozen=True)
class RankRow:
    rank: int
    corcondia: Optional[float]
    fit: Optional[float]
    error: Optional[str] = None


@dataclass(frozen=True)
class QualityResult:
    best_rank: int
    corcondia: float
    fit: float
    per_rank: tuple[RankRow, ...]
    policy: str = "consistent"

    def to_dict(self) -> dict:
        return {
            "best_rank": self.best_rank,
            "corcondia": self.corcondia,
            "fit": self.fit,
            "policy": self.policy,
            "per_rank": [
                {"rank": r.rank, "corcondia": r.corcondia, "fit": r.fit, "error": r.error}
                for r in self.per_rank
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityResult":
        rows = tuple(RankRow(**r) for r in d["per_rank"])
        return cls(d["best_rank"], d["corcondia"], d["fit"], rows, d.get("policy", "consistent"))


def _select(rows, cfg: "QualityConfig") -> RankRow:
    ok = [r for r in rows if r.corcondia is not None]
    if cfg.policy == "argmax":
        return max(ok, key=lambda r: (r.corcondia, -r.rank))
    chosen = None
    for r in rows:
        if r.corcondia is None or r.corcondia < cfg.min_corcondia:
            break
        if chosen is not None:
            if r.fit <= 0 or (r.fit - chosen.fit) / r.fit < cfg.min_fit_gain:
                break
        chosen = r
    # Rank 1 itself failed: fall back to the best available score.
    return chosen or max(ok, key=lambda r: (r.corcondia, -r.rank))


def quality_search(t: CooTensor, cfg: Optional[QualityConfig] = None, **overrides) -> QualityResult:
    """Decompose ``t`` at ranks ``1..R_max`` and choose a rank by core consistency.

    A rank whose decomposition fails is recorded with ``corcondia=None`` and
    skipped by the selection; if every rank fails, :class:`NumericalError`
    is raised.
    """
    cfg = replace(cfg or QualityConfig(), **overrides)
    rows = []
    for R in range(1, cfg.R_max + 1):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", IllConditionedWarning)
                f = cp_als(
                    t, R, max_iters=cfg.als.max_iters, tol=cfg.als.tol,
                    seed=cfg.als.seed, n_restarts=cfg.als.n_restarts,
                )
                cc = corcondia(t, f)
            rows.append(RankRow(R, cc, float(f.fit)))
        except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("rank %d failed: %s", R, exc)
            rows.append(RankRow(R, None, None, str(exc)))
    if all(r.corcondia is None for r in rows):
        raise NumericalError("CP decomposition failed at every rank")
    best = _select(rows, cfg)
    return QualityResult(best.rank, best.corcondia, best.fit, tuple(rows), cfg.policy)
