"""Sparse three-mode tensors in coordinate format.

All indices in this module are 0-based. The text formats in :mod:`adagran.io`
translate to and from the 1-based convention used on disk.

Entries of a :class:`CooTensor` are kept in canonical order (third mode first,
then rows, then columns), which lets a frontal slice or a run of consecutive
slices be located with two lookups into a slice pointer array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "CooTensor",
    "SliceMatrix",
    "AggregationMap",
    "from_entries",
    "slice_at",
    "aggregate_range",
    "mode3_product",
]


def _merge_coordinates(keys: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum values sharing a linear key, drop exact zeros, return sorted by key."""
    if keys.size == 0:
        return keys, vals
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    vals = vals[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    merged = np.add.reduceat(vals, starts)
    keys = keys[starts]
    keep = merged != 0.0
    return keys[keep], merged[keep]


@dataclass(frozen=True, eq=False)
class SliceMatrix:
    """A frontal slice, or the sum of a run of consecutive frontal slices.

    Attributes
    ----------
    shape : (int, int)
    rows, cols : ndarray of int64
        Coordinates of the nonzeros, sorted row-major, no duplicates.
    vals : ndarray of float64
        Nonzero values (no stored zeros).
    source_range : (int, int)
        Inclusive range of parent slices this matrix aggregates.
    """

    shape: tuple[int, int]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    source_range: tuple[int, int]

    def __post_init__(self):
        for arr in (self.rows, self.cols, self.vals):
            arr.setflags(write=False)

    @classmethod
    def from_triplets(cls, shape, rows, cols, vals, source_range) -> "SliceMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        keys, vals = _merge_coordinates(rows * shape[1] + cols, vals)
        return cls(
            shape=(int(shape[0]), int(shape[1])),
            rows=keys // shape[1],
            cols=keys % shape[1],
            vals=vals,
            source_range=(int(source_range[0]), int(source_range[1])),
        )

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def to_scipy(self) -> sparse.csr_matrix:
        return sparse.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    def compact_dense(self) -> np.ndarray:
        """Dense matrix restricted to the rows and columns that hold nonzeros.

        Dropping all-zero rows and columns leaves the nonzero singular values
        unchanged, so spectral utilities work on this much smaller array.
        """
        if self.nnz == 0:
            return np.zeros((0, 0))
        urows, ri = np.unique(self.rows, return_inverse=True)
        ucols, ci = np.unique(self.cols, return_inverse=True)
        out = np.zeros((urows.size, ucols.size))
        out[ri, ci] = self.vals
        return out

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(int(i), int(j)): float(v) for i, j, v in zip(self.rows, self.cols, self.vals)}


@dataclass(frozen=True, eq=False)
class CooTensor:
    """Immutable sparse I x J x K tensor.

    Build instances with :func:`from_entries` (validating) or
    :meth:`from_arrays`; the raw constructor trusts its inputs.

    Attributes
    ----------
    shape : (int, int, int)
    subs : ndarray of int64, shape (nnz, 3)
        0-based (i, j, k) coordinates in canonical (k, i, j) order.
    vals : ndarray of float64, shape (nnz,)
    """

    shape: tuple[int, int, int]
    subs: np.ndarray
    vals: np.ndarray
    _slice_ptr: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.subs, self.vals, self._slice_ptr):
            arr.setflags(write=False)

    @classmethod
    def from_arrays(cls, shape, subs, vals) -> "CooTensor":
        """Validate, merge duplicates additively, drop zeros and sort."""
        shape = tuple(int(s) for s in shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"shape must be three positive sizes, got {shape}")
        subs = np.asarray(subs, dtype=np.int64).reshape(-1, 3)
        vals = np.asarray(vals, dtype=np.float64).reshape(-1)
        if subs.shape[0] != vals.shape[0]:
            raise ValueError("subs and vals differ in length")
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise ValueError(f"entry {bad} has non-finite value {vals[bad]}")
        bounds = np.asarray(shape)
        oob = np.any((subs < 0) | (subs >= bounds), axis=1)
        if oob.any():
            bad = int(np.flatnonzero(oob)[0])
            i, j, k = subs[bad]
            raise IndexError(
                f"entry {bad} at (i={i}, j={j}, k={k}) lies outside shape {shape} (0-based)"
            )
        I, J, K = shape
        keys = (subs[:, 2] * I + subs[:, 0]) * J + subs[:, 1]
        keys, vals = _merge_coordinates(keys, vals)
        k, rest = np.divmod(keys, I * J)
        i, j = np.divmod(rest, J)
        subs = np.column_stack([i, j, k]).astype(np.int64)
        return cls._trusted(shape, subs, vals)

    @classmethod
    def _trusted(cls, shape, subs, vals) -> "CooTensor":
        ptr = np.searchsorted(subs[:, 2], np.arange(shape[2] + 1), side="left")
        return cls(shape=tuple(shape), subs=subs, vals=vals, _slice_ptr=ptr.astype(np.int64))

    @classmethod
    def empty(cls, shape) -> "CooTensor":
        return cls.from_arrays(shape, np.zeros((0, 3), dtype=np.int64), np.zeros(0))

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    @property
    def density(self) -> float:
        I, J, K = self.shape
        return self.nnz / (I * J * K)

    @property
    def K(self) -> int:
        return self.shape[2]

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.vals, self.vals)))

    def slice_nnz(self) -> np.ndarray:
        """Number of nonzeros in each frontal slice."""
        return np.diff(self._slice_ptr)

    def entries(self) -> Iterator[tuple[int, int, int, float]]:
        for (i, j, k), v in zip(self.subs.tolist(), self.vals.tolist()):
            yield i, j, k, v

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.subs[:, 0], self.subs[:, 1], self.subs[:, 2]] = self.vals
        return out

    @classmethod
    def from_dense(cls, array: np.ndarray) -> "CooTensor":
        array = np.asarray(array, dtype=np.float64)
        subs = np.argwhere(array != 0)
        return cls.from_arrays(array.shape, subs, array[tuple(subs.T)])

    def equals(self, other: "CooTensor") -> bool:
        """Exact entrywise equality (shape, coordinates and values)."""
        return (
            self.shape == other.shape
            and np.array_equal(self.subs, other.subs)
            and np.array_equal(self.vals, other.vals)
        )

    def _range_bounds(self, k_start: int, k_end: int) -> tuple[int, int]:
        return int(self._slice_ptr[k_start]), int(self._slice_ptr[k_end + 1])


def from_entries(shape: Sequence[int], raw_entries: Iterable[Sequence[float]]) -> CooTensor:
    """Build a tensor from ``(i, j, k, v)`` records with 0-based indices.

    Duplicate coordinates are summed, entries that cancel to exactly zero are
    dropped, and an out-of-bounds index raises :class:`IndexError` naming the
    offending record.
    """
    raw = list(raw_entries)
    if not raw:
        return CooTensor.empty(shape)
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError("entries must be (i, j, k, v) records")
    idx = arr[:, :3]
    if not np.all(idx == np.round(idx)):
        bad = int(np.flatnonzero(np.any(idx != np.round(idx), axis=1))[0])
        raise ValueError(f"entry {bad} has a non-integer index: {raw[bad]}")
    return CooTensor.from_arrays(shape, idx.astype(np.int64), arr[:, 3])


def aggregate_range(t: CooTensor, k_start: int, k_end: int) -> SliceMatrix:
    """Elementwise sum of frontal slices ``k_start..k_end`` (inclusive)."""
    if not (0 <= k_start <= k_end < t.K):
        raise IndexError(f"invalid slice range [{k_start}, {k_end}] for K={t.K}")
    lo, hi = t._range_bounds(k_start, k_end)
    sub = t.subs[lo:hi]
    return SliceMatrix.from_triplets(
        t.shape[:2], sub[:, 0], sub[:, 1], t.vals[lo:hi], (k_start, k_end)
    )


def slice_at(t: CooTensor, k: int) -> SliceMatrix:
    """Frontal slice ``k``."""
    if not 0 <= k < t.K:
        raise IndexError(f"slice {k} out of range for K={t.K}")
    return aggregate_range(t, k, k)


@dataclass(frozen=True)
class AggregationMap:
    """Contiguous partition of slices ``0..K-1`` into ``K*`` inclusive ranges.

    This is the sparse form of the binary K* x K matrix whose row ``r`` has
    ones exactly on the slices merged into output slice ``r``.
    """

    K: int
    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "boundaries", tuple((int(s), int(e)) for s, e in self.boundaries)
        )
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not self.boundaries:
            raise ValueError("an aggregation map needs at least one range")
        expected = 0
        for r, (s, e) in enumerate(self.boundaries):
            if s != expected or e < s:
                raise ValueError(
                    f"range {r} = [{s}, {e}] breaks the contiguous cover (expected start {expected})"
                )
            expected = e + 1
        if expected != self.K:
            raise ValueError(f"ranges cover 0..{expected - 1}, expected 0..{self.K - 1}")

    @property
    def K_star(self) -> int:
        return len(self.boundaries)

    @classmethod
    def identity(cls, K: int) -> "AggregationMap":
        return cls(K, tuple((k, k) for k in range(K)))

    @classmethod
    def single(cls, K: int) -> "AggregationMap":
        return cls(K, ((0, K - 1),))

    @classmethod
    def from_cuts(cls, K: int, cuts: Iterable[int]) -> "AggregationMap":
        """Build from the start indices of every range after the first."""
        starts = [0] + sorted(int(c) for c in cuts)
        ends = [s - 1 for s in starts[1:]] + [K - 1]
        return cls(K, tuple(zip(starts, ends)))

    @classmethod
    def from_dense(cls, w: np.ndarray) -> "AggregationMap":
        w = np.asarray(w)
        if not np.all((w == 0) | (w == 1)) or not np.all(w.sum(axis=0) == 1):
            raise ValueError("W must be binary with exactly one 1 per column")
        owner = np.argmax(w, axis=0)
        if np.any(np.diff(owner) < 0) or np.any(np.diff(owner) > 1) or owner[0] != 0:
            raise ValueError("rows of W must cover consecutive column blocks in order")
        return cls.from_cuts(w.shape[1], np.flatnonzero(np.diff(owner)) + 1)

    def cuts(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.boundaries[1:])

    def owner(self) -> np.ndarray:
        """Output slice index of every input slice."""
        out = np.empty(self.K, dtype=np.int64)
        for r, (s, e) in enumerate(self.boundaries):
            out[s : e + 1] = r
        return out

    def to_dense(self) -> np.ndarray:
        w = np.zeros((self.K_star, self.K), dtype=np.int8)
        w[self.owner(), np.arange(self.K)] = 1
        return w


def mode3_product(t: CooTensor, w: AggregationMap) -> CooTensor:
    """Aggregate slices of ``t`` according to ``w``; output has ``w.K_star`` slices."""
    if w.K != t.K:
        raise ValueError(f"map expects K={w.K} slices but the tensor has K={t.K}")
    owner = w.owner()
    subs = t.subs.copy()
    subs[:, 2] = owner[subs[:, 2]]
    return CooTensor.from_arrays((t.shape[0], t.shape[1], w.K_star), subs, t.vals)
