"""Greedy adaptive aggregation of the third mode, plus fixed-window and
exhaustive alternatives.

:func:`run` makes one left-to-right pass over the slices. It keeps an open
aggregate ``[i, j-1]`` and scores the candidate ``[i, j]``; the candidate
slice is absorbed while :func:`adagran.utility.should_aggregate` says so,
otherwise the open range is closed and a new one starts at ``j``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from adagran import utility as ut
from adagran.sparse_tensor import (
    AggregationMap,
    CooTensor,
    SliceMatrix,
    mode3_product,
)

__all__ = [
    "CutRecord",
    "GreedyRunResult",
    "OracleResult",
    "run",
    "fixed_aggregate",
    "enumerate_partitions",
    "count_partitions",
    "optimal_exhaustive",
    "EnumerationCapError",
]

log = logging.getLogger(__name__)

DEFAULT_K_CAP = 20


class EnumerationCapError(ValueError):
    pass


@dataclass(frozen=True)
class CutRecord:
    """A closed range ``[start, cut - 1]`` and the scores that closed it."""

    cut: int
    prev: float
    curr: float


@dataclass(frozen=True)
class GreedyRunResult:
    map: AggregationMap
    utility: ut.UtilityKind
    config: ut.UtilityConfig
    trace: tuple[CutRecord, ...]
    n_evaluations: int
    elapsed: float = field(compare=False)

    def aggregate(self, t: CooTensor) -> CooTensor:
        return mode3_product(t, self.map)


class _RunningSlice:
    """Open aggregate that grows by one slice at a time.

    Entries are appended and re-merged on every step, so the cost of a step
    is proportional to the size of the open aggregate, not to K.
    """

    def __init__(self, t: CooTensor, k: int):
        self._t = t
        self.start = k
        self.end = k
        lo, hi = t._range_bounds(k, k)
        self._rows = t.subs[lo:hi, 0]
        self._cols = t.subs[lo:hi, 1]
        self._vals = t.vals[lo:hi]
        self.matrix = SliceMatrix.from_triplets(
            t.shape[:2], self._rows, self._cols, self._vals, (k, k)
        )

    def extended(self) -> SliceMatrix:
        t = self._t
        lo, hi = t._range_bounds(self.end + 1, self.end + 1)
        prev = self.matrix
        return SliceMatrix.from_triplets(
            t.shape[:2],
            np.concatenate([prev.rows, t.subs[lo:hi, 0]]),
            np.concatenate([prev.cols, t.subs[lo:hi, 1]]),
            np.concatenate([prev.vals, t.vals[lo:hi]]),
            (self.start, self.end + 1),
        )

    def absorb(self, candidate: SliceMatrix) -> None:
        self.end += 1
        self.matrix = candidate


def _evaluate(kind, m: SliceMatrix, cfg) -> ut.UtilityValue:
    try:
        return ut.evaluate(kind, m, cfg)
    except ut.UtilityError:
        raise
    except Exception as exc:  # attach the slice range to unexpected failures
        raise ut.UtilityError(
            f"{kind.value} utility failed on slices {m.source_range}: {exc}"
        ) from exc


def run(
    t: CooTensor,
    kind: "ut.UtilityKind | str",
    cfg: Optional[ut.UtilityConfig] = None,
) -> GreedyRunResult:
    """Greedy single-pass aggregation of ``t`` under one utility.

    The score of the open aggregate is carried forward on absorb (it equals
    the candidate's score), and re-initialized from the singleton slice after
    every cut. The trailing open range is emitted once the slices run out.
    At most ``2K - 1`` utility evaluations are made.
    """
    kind = ut.UtilityKind.parse(kind)
    cfg = cfg or ut.UtilityConfig()
    started = time.perf_counter()
    K = t.K
    cuts: list[CutRecord] = []

    open_ = _RunningSlice(t, 0)
    prev = _evaluate(kind, open_.matrix, cfg)
    n_eval = 1
    j = 1
    while j < K:
        candidate = open_.extended()
        curr = _evaluate(kind, candidate, cfg)
        n_eval += 1
        if ut.should_aggregate(kind, prev, curr, cfg):
            open_.absorb(candidate)
            prev = curr
        else:
            cuts.append(CutRecord(j, prev.scalar, curr.scalar))
            open_ = _RunningSlice(t, j)
            prev = _evaluate(kind, open_.matrix, cfg)
            n_eval += 1
        j += 1

    wmap = AggregationMap.from_cuts(K, (c.cut for c in cuts))
    return GreedyRunResult(
        map=wmap,
        utility=kind,
        config=cfg,
        trace=tuple(cuts),
        n_evaluations=n_eval,
        elapsed=time.perf_counter() - started,
    )


def fixed_aggregate(t: CooTensor, window: int) -> tuple[CooTensor, AggregationMap]:
    """Aggregate every ``window`` consecutive slices; the last range may be shorter."""
    if window < 1:
        raise ValueError("window must be >= 1")
    wmap = AggregationMap.from_cuts(t.K, range(window, t.K, window))
    return mode3_product(t, wmap), wmap


def count_partitions(K: int) -> int:
    return 2 ** (K - 1)


def enumerate_partitions(K: int, cap: int = DEFAULT_K_CAP) -> Iterator[AggregationMap]:
    """Yield all ``2**(K-1)`` contiguous partitions of ``0..K-1``.

    Bit ``b`` of the counter set means a new range starts at slice ``b + 1``;
    maps come out in increasing counter order.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > cap:
        raise EnumerationCapError(f"K={K} exceeds the enumeration cap {cap}")
    for mask in range(count_partitions(K)):
        cuts = [b + 1 for b in range(K - 1) if mask >> b & 1]
        yield AggregationMap.from_cuts(K, cuts)


@dataclass(frozen=True)
class OracleResult:
    map: AggregationMap
    score: float
    n_evaluated: int
    failures: tuple[tuple[AggregationMap, str], ...] = ()


def optimal_exhaustive(
    t: CooTensor,
    quality: Callable[[CooTensor, AggregationMap], float],
    K_cap: int = DEFAULT_K_CAP,
) -> OracleResult:
    """Best map by brute force over every contiguous partition.

    ``quality(y, w)`` scores the aggregated tensor ``y = mode3_product(t, w)``.
    Ties go to fewer output slices, then to the lexicographically smallest
    boundary list. Candidates whose evaluation raises are logged and skipped.
    """
    best_key = None
    best: Optional[tuple[AggregationMap, float]] = None
    failures = []
    n = 0
    for w in enumerate_partitions(t.K, K_cap):
        try:
            score = float(quality(mode3_product(t, w), w))
            if not np.isfinite(score):
                raise ArithmeticError(f"non-finite score {score}")
        except Exception as exc:
            log.warning("oracle skipped %s: %s", w.boundaries, exc)
            failures.append((w, str(exc)))
            continue
        n += 1
        key = (-score, w.K_star, w.boundaries)
        if best_key is None or key < best_key:
            best_key = key
            best = (w, score)
    if best is None:
        raise ArithmeticError("quality evaluation failed on every candidate")
    return OracleResult(best[0], best[1], n, tuple(failures))
