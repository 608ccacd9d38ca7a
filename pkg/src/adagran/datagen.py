"""Synthetic tensors with planted communities and time-varying activity.

Mode-1 and mode-2 entities each belong to exactly one latent factor, so the
factor matrices have one nonzero per row and the factor index is a ground
truth community label. Time is split into epochs; each epoch switches a
random subset of factors on. Every slice then draws a fixed number of
nonzeros from the cells of the active factors, with probability proportional
to the planted intensity, which is what makes a single raw slice too sparse
to show structure while whole epochs show it clearly.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from adagran.evaluation import LabelVector
from adagran.sparse_tensor import AggregationMap, CooTensor

__all__ = [
    "Scenario",
    "SyntheticSpec",
    "GroundTruth",
    "generate",
    "explode_nonzeros",
    "exploded_boundaries",
    "planted_partition_graph",
    "semi_synthetic",
]


class Scenario(enum.Enum):
    FIXED = "fixed"
    RANDOMIZED = "randomized"


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters.

    ``density`` is the fraction of the planted support (all cells covered by
    some factor block) sampled in each slice, so every slice carries the same
    number of nonzeros whenever the active factors cover enough cells.
    ``window_jitter`` bounds the epoch lengths of the randomized scenario.
    """

    I: int = 30
    J: int = 30
    n_factors: int = 3
    n_epochs: int = 10
    base_window: int = 10
    scenario: Scenario = Scenario.FIXED
    window_jitter: tuple[int, int] = (5, 20)
    density: float = 0.05
    noise: float = 0.0
    activation_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "window_jitter", tuple(int(x) for x in self.window_jitter))
        if self.n_factors < 1:
            raise ValueError("n_factors must be >= 1")
        if self.I < self.n_factors or self.J < self.n_factors:
            raise ValueError("each factor needs at least one entity per mode")
        if self.base_window < 1 or self.n_epochs < 1:
            raise ValueError("base_window and n_epochs must be >= 1")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 < self.activation_prob <= 1:
            raise ValueError("activation_prob must lie in (0, 1]")
        lo, hi = self.window_jitter
        if self.scenario is Scenario.RANDOMIZED and not (
            1 <= lo <= hi <= 10 * self.base_window
        ):
            raise ValueError("window_jitter must satisfy 1 <= lo <= hi <= 10 * base_window")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["window_jitter"] = list(self.window_jitter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Planted structure.

    ``epoch_boundaries`` are the slice indices at which a new epoch starts
    (the first epoch's start, 0, is implicit). ``active_factors[e]`` lists
    the factors switched on in epoch ``e``.
    """

    labels_mode1: LabelVector
    labels_mode2: LabelVector
    epoch_boundaries: tuple[int, ...]
    active_factors: tuple[tuple[int, ...], ...]
    K: int

    def __post_init__(self):
        b = self.epoch_boundaries
        if any(x >= y for x, y in zip(b, b[1:])) or (b and (b[0] <= 0 or b[-1] >= self.K)):
            raise ValueError("epoch boundaries must be strictly increasing inside 1..K-1")

    def epoch_map(self) -> AggregationMap:
        return AggregationMap.from_cuts(self.K, self.epoch_boundaries)

    def to_dict(self) -> dict:
        return {
            "labels_mode1": self.labels_mode1.assignments.tolist(),
            "labels_mode2": self.labels_mode2.assignments.tolist(),
            "epoch_boundaries": list(self.epoch_boundaries),
            "active_factors": [list(a) for a in self.active_factors],
            "K": self.K,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            LabelVector(np.asarray(d["labels_mode1"])),
            LabelVector(np.asarray(d["labels_mode2"])),
            tuple(d["epoch_boundaries"]),
            tuple(tuple(a) for a in d["active_factors"]),
            int(d["K"]),
        )


def _balanced_labels(n: int, n_labels: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_labels)


def _epoch_lengths(spec: SyntheticSpec, rng) -> list[int]:
    if spec.scenario is Scenario.FIXED:
        return [spec.base_window] * spec.n_epochs
    lo, hi = spec.window_jitter
    return [int(x) for x in rng.integers(lo, hi + 1, size=spec.n_epochs)]


def _activations(n_factors: int, n_epochs: int, prob: float, rng) -> list[tuple[int, ...]]:
    out = []
    for _ in range(n_epochs):
        on = np.flatnonzero(rng.random(n_factors) < prob)
        if on.size == 0:
            on = np.array([rng.integers(n_factors)])
        out.append(tuple(int(r) for r in on))
    return out


def _truncated_normal(rng, size, sigma):
    if sigma == 0:
        return np.zeros(size)
    z = rng.standard_normal(size)
    bad = np.abs(z) > 3
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 3
    return sigma * z


def _sample_slices(
    cell_rows: np.ndarray,
    cell_cols: np.ndarray,
    cell_factor: np.ndarray,
    cell_base: np.ndarray,
    lengths: Sequence[int],
    active: Sequence[tuple[int, ...]],
    temporal: np.ndarray,
    per_slice: int,
    noise: float,
    rng,
):
    """Draw ``per_slice`` cells per slice from the active factors' support."""
    subs, vals = [], []
    k = 0
    for e, length in enumerate(lengths):
        mask = np.isin(cell_factor, active[e])
        idx = np.flatnonzero(mask)
        intensity = cell_base[idx] * temporal[e, cell_factor[idx]]
        p = intensity / intensity.sum()
        take = min(per_slice, idx.size)
        for _ in range(length):
            pick = np.sort(rng.choice(idx.size, size=take, replace=False, p=p))
            v = intensity[pick] + _truncated_normal(rng, take, noise)
            cells = idx[pick]
            subs.append(np.column_stack([cell_rows[cells], cell_cols[cells], np.full(take, k)]))
            vals.append(v)
            k += 1
    return np.concatenate(subs), np.concatenate(vals), k


def _boundaries(lengths: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(x) for x in np.cumsum(lengths)[:-1])


def generate(spec: SyntheticSpec) -> tuple[CooTensor, GroundTruth]:
    """Build a raw (not yet exploded) tensor and its ground truth."""
    rng = np.random.default_rng(spec.seed)
    R = spec.n_factors
    lab1 = _balanced_labels(spec.I, R, rng)
    lab2 = _balanced_labels(spec.J, R, rng)
    a = rng.uniform(0.5, 1.5, size=spec.I)
    b = rng.uniform(0.5, 1.5, size=spec.J)

    # Support: every (i, j) whose row and column share a factor.
    ii, jj = np.nonzero(lab1[:, None] == lab2[None, :])
    factor = lab1[ii]
    base = a[ii] * b[jj]

    lengths = _epoch_lengths(spec, rng)
    active = _activations(R, spec.n_epochs, spec.activation_prob, rng)
    temporal = np.zeros((spec.n_epochs, R))
    for e, on in enumerate(active):
        temporal[e, list(on)] = rng.uniform(0.5, 1.5, size=len(on))

    per_slice = max(1, int(round(spec.density * ii.size)))
    subs, vals, K = _sample_slices(
        ii, jj, factor, base, lengths, active, temporal, per_slice, spec.noise, rng
    )
    t = CooTensor.from_arrays((spec.I, spec.J, K), subs, vals)
    truth = GroundTruth(
        LabelVector(lab1), LabelVector(lab2), _boundaries(lengths), tuple(active), K
    )
    return t, truth


def explode_nonzeros(t: CooTensor) -> tuple[CooTensor, AggregationMap]:
    """Give every nonzero its own slice, in canonical (k, i, j) order.

    Returns the exploded tensor (``K = nnz``) and the map that folds the
    exploded slices back into the original nonempty slices. When ``t`` has
    no empty slices, ``mode3_product(exploded, map)`` reproduces ``t``
    exactly.
    """
    if t.nnz == 0:
        raise ValueError("cannot explode an empty tensor")
    subs = t.subs.copy()
    subs[:, 2] = np.arange(t.nnz)
    exploded = CooTensor._trusted((t.shape[0], t.shape[1], t.nnz), subs, t.vals.copy())
    counts = t.slice_nnz()
    ends = np.cumsum(counts[counts > 0])
    starts = np.r_[0, ends[:-1]]
    inverse = AggregationMap(t.nnz, tuple(zip(starts.tolist(), (ends - 1).tolist())))
    return exploded, inverse


def exploded_boundaries(t: CooTensor, truth: GroundTruth) -> GroundTruth:
    """Translate ground-truth epoch boundaries into exploded slice indices."""
    ptr = np.r_[0, np.cumsum(t.slice_nnz())]
    b = tuple(int(ptr[k]) for k in truth.epoch_boundaries)
    return GroundTruth(truth.labels_mode1, truth.labels_mode2, b, truth.active_factors, t.nnz)


def planted_partition_graph(
    sizes: Sequence[int], p_in: float, p_out: float, seed: int = 0
) -> tuple[list[tuple[int, int]], LabelVector]:
    """Undirected stochastic block model graph; vertices numbered block by block."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    keep = rng.random(iu.size) < np.where(same, p_in, p_out)
    edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    return edges, LabelVector(labels)


def semi_synthetic(
    graph_edges: Sequence[tuple[int, int]],
    labels: LabelVector,
    spec: SyntheticSpec,
    explode: bool = True,
) -> tuple[CooTensor, GroundTruth]:
    """Temporal tensor over a labeled graph's adjacency, exploded by default.

    Communities play the role of factors: an edge is active in an epoch when
    both endpoint communities are active. Each slice samples
    ``spec.density`` of the directed adjacency entries uniformly from the
    active edges. ``spec.I``, ``spec.J`` and ``spec.n_factors`` are taken
    from the graph and labels.
    """
    n = labels.n_entities
    edges = np.asarray(graph_edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = edges[np.any((edges < 0) | (edges >= n), axis=1)][0]
        raise ValueError(f"edge {tuple(bad)} touches an unlabeled vertex")
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    lab = labels.assignments
    R = labels.n_labels
    rng = np.random.default_rng(spec.seed)
    lengths = _epoch_lengths(spec, rng)
    active = _activations(R, spec.n_epochs, spec.activation_prob, rng)

    subs, vals, k = [], [], 0
    per_slice = max(1, int(round(spec.density * rows.size)))
    for e, length in enumerate(lengths):
        on = np.isin(lab[rows], active[e]) & np.isin(lab[cols], active[e])
        idx = np.flatnonzero(on)
        take = min(per_slice, idx.size)
        for _ in range(length):
            cells = idx[np.sort(rng.choice(idx.size, size=take, replace=False))] if take else idx[:0]
            subs.append(np.column_stack([rows[cells], cols[cells], np.full(take, k)]))
            vals.append(1.0 + _truncated_normal(rng, take, spec.noise))
            k += 1
    t = CooTensor.from_arrays((n, n, k), np.concatenate(subs), np.concatenate(vals))
    truth = GroundTruth(labels, labels, _boundaries(lengths), tuple(active), k)
    if not explode:
        return t, truth
    exploded, _ = explode_nonzeros(t)
    return exploded, exploded_boundaries(t, truth)
