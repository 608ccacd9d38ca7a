"""Text formats. Every index on disk is 1-based.

Tensor (``.coo``)::

    # shape I J K
    i j k v

Aggregation map (``.map``)::

    # K=<K> Kstar=<K*>
    r k_start k_end

Factor matrix::

    # rows cols
    <row-major values, one matrix row per line>

Labels: ``entity_id label`` per line. Edge lists: ``u v`` per line.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Union

import numpy as np

from adagran.cpd import KruskalFactors
from adagran.evaluation import LabelVector
from adagran.sparse_tensor import AggregationMap, CooTensor

PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


def _data_lines(path: PathLike):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield lineno, s


def _header(path: PathLike) -> str:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                return line.strip()
    raise FormatError(f"{path}: empty file")


def write_coo(t: CooTensor, path: PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("# shape {} {} {}\n".format(*t.shape))
        for (i, j, k), v in zip(t.subs.tolist(), t.vals.tolist()):
            fh.write(f"{i + 1} {j + 1} {k + 1} {v!r}\n")


def read_coo(path: PathLike) -> CooTensor:
    m = re.fullmatch(r"#\s*shape\s+(\d+)\s+(\d+)\s+(\d+)", _header(path))
    if not m:
        raise FormatError(f"{path}: first line must be '# shape I J K'")
    shape = tuple(int(x) for x in m.groups())
    subs, vals = [], []
    for lineno, s in _data_lines(path):
        parts = s.split()
        try:
            i, j, k = (int(x) for x in parts[:3])
            v = float(parts[3])
        except (ValueError, IndexError):
            raise FormatError(f"{path}:{lineno}: expected 'i j k v', got {s!r}") from None
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        subs.append((i - 1, j - 1, k - 1))
        vals.append(v)
    try:
        return CooTensor.from_arrays(shape, np.asarray(subs).reshape(-1, 3), vals)
    except IndexError as exc:
        raise FormatError(f"{path}: {exc} (indices on disk are 1-based)") from None


def write_map(w: AggregationMap, path: PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(f"# K={w.K} Kstar={w.K_star}\n")
        for r, (s, e) in enumerate(w.boundaries, 1):
            fh.write(f"{r} {s + 1} {e + 1}\n")


def read_map(path: PathLike) -> AggregationMap:
    m = re.fullmatch(r"#\s*K=(\d+)\s+Kstar=(\d+)", _header(path))
    if not m:
        raise FormatError(f"{path}: first line must be '# K=<K> Kstar=<K*>'")
    K, K_star = int(m.group(1)), int(m.group(2))
    ranges = []
    for lineno, s in _data_lines(path):
        try:
            r, a, b = (int(x) for x in s.split())
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'r k_start k_end'") from None
        if r != len(ranges) + 1:
            raise FormatError(f"{path}:{lineno}: range ids must run 1..K* in order")
        ranges.append((a - 1, b - 1))
    if len(ranges) != K_star:
        raise FormatError(f"{path}: header says K*={K_star} but found {len(ranges)} ranges")
    return AggregationMap(K, tuple(ranges))


def write_matrix(M: np.ndarray, path: PathLike) -> None:
    M = np.atleast_2d(M)
    with open(path, "w") as fh:
        fh.write(f"# {M.shape[0]} {M.shape[1]}\n")
        for row in M.tolist():
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_matrix(path: PathLike) -> np.ndarray:
    m = re.fullmatch(r"#\s*(\d+)\s+(\d+)", _header(path))
    if not m:
        raise FormatError(f"{path}: first line must be '# rows cols'")
    rows, cols = int(m.group(1)), int(m.group(2))
    data = [[float(x) for x in s.split()] for _, s in _data_lines(path)]
    M = np.asarray(data, dtype=np.float64).reshape(-1, cols) if data else np.zeros((0, cols))
    if M.shape != (rows, cols):
        raise FormatError(f"{path}: header says {rows}x{cols}, found {M.shape}")
    return M


def write_factors(f: KruskalFactors, prefix: PathLike) -> list[Path]:
    """Write ``<prefix>.A``, ``.B``, ``.C`` and ``.weights``."""
    prefix = Path(prefix)
    paths = []
    for name, M in (("A", f.A), ("B", f.B), ("C", f.C), ("weights", f.weights[None, :])):
        p = prefix.with_name(f"{prefix.name}.{name}")
        write_matrix(M, p)
        paths.append(p)
    return paths


def read_factors(prefix: PathLike) -> KruskalFactors:
    prefix = Path(prefix)
    A, B, C, w = (read_matrix(prefix.with_name(f"{prefix.name}.{n}")) for n in ("A", "B", "C", "weights"))
    return KruskalFactors(A, B, C, weights=w.reshape(-1))


def write_labels(labels: LabelVector, path: PathLike) -> None:
    with open(path, "w") as fh:
        for e, lab in enumerate(labels.assignments.tolist(), 1):
            fh.write(f"{e} {lab}\n")


def read_labels(path: PathLike, n_entities: int | None = None) -> LabelVector:
    """Read ``entity_id label`` lines; entity ids are 1-based, labels arbitrary tokens."""
    found = {}
    for lineno, s in _data_lines(path):
        parts = s.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'entity_id label'")
        try:
            e = int(parts[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: entity id must be an integer") from None
        if e in found:
            raise FormatError(f"{path}:{lineno}: entity {e} labeled twice")
        found[e] = parts[1]
    n = n_entities if n_entities is not None else max(found, default=0)
    missing = [e for e in range(1, n + 1) if e not in found]
    if missing:
        raise FormatError(f"{path}: entities without a label, e.g. {missing[:5]}")
    extra = [e for e in found if not 1 <= e <= n]
    if extra:
        raise FormatError(f"{path}: entity ids outside 1..{n}, e.g. {extra[:5]}")
    tokens = [found[e] for e in range(1, n + 1)]
    try:
        return LabelVector.from_labels([int(x) for x in tokens])
    except ValueError:
        return LabelVector.from_labels(tokens)


def read_edges(path: PathLike) -> list[tuple[int, int]]:
    """Edge list with 1-based vertex ids; returned 0-based."""
    edges = []
    for lineno, s in _data_lines(path):
        try:
            u, v = (int(x) for x in s.split())
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'u v'") from None
        edges.append((u - 1, v - 1))
    return edges


def write_edges(edges, path: PathLike) -> None:
    with open(path, "w") as fh:
        for u, v in edges:
            fh.write(f"{u + 1} {v + 1}\n")


def dump_json(obj, path: PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: PathLike):
    with open(path) as fh:
        return json.load(fh)
