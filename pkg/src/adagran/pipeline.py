"""CSV ingestion, run configuration and the aggregate/decompose/evaluate pipeline."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from typing import Literal, Optional, Sequence

import numpy as np

from adagran import cpd, evaluation as ev, icebreaker, io
from adagran.sparse_tensor import AggregationMap, CooTensor, mode3_product
from adagran.utility import UtilityConfig, UtilityKind

__all__ = [
    "SCHEMA_VERSION",
    "BASELINE_WINDOWS",
    "IngestSpec",
    "IngestResult",
    "IngestError",
    "StageError",
    "EvalConfig",
    "RunConfig",
    "ingest",
    "aggregate",
    "evaluate_tensor",
    "run_pipeline",
    "pipeline",
    "sweep_methods",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BASELINE_WINDOWS = (10, 100, 1000)


class IngestError(ValueError):
    """Too many rows of the input could not be parsed."""


class StageError(Exception):
    """A component failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- ingest


@dataclass(frozen=True)
class IngestSpec:
    """Column mapping and time binning for an event CSV.

    Without ``value_col`` each row counts as one event of value 1.0.
    ``time_format`` is ``"epoch"`` (seconds, may be fractional) or
    ``"iso8601"``; ISO timestamps without an offset are read as UTC. Rows are
    binned into slices of ``bin_seconds``.
    """

    mode1_col: str
    mode2_col: str
    time_col: str
    value_col: Optional[str] = None
    time_format: Literal["epoch", "iso8601"] = "epoch"
    bin_seconds: float = 3600.0
    reject_cap: float = 0.01
    delimiter: str = ","

    def __post_init__(self):
        cols = [self.mode1_col, self.mode2_col, self.time_col]
        if self.value_col is not None:
            cols.append(self.value_col)
        if len(set(cols)) != len(cols):
            raise ValueError(f"mapped columns must be distinct, got {cols}")
        if self.time_format not in ("epoch", "iso8601"):
            raise ValueError(f"unknown time format {self.time_format!r}")
        if not self.bin_seconds > 0:
            raise ValueError("bin_seconds must be positive")
        if not 0.0 <= self.reject_cap <= 1.0:
            raise ValueError("reject_cap must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IngestSpec":
        return cls(**d)


@dataclass(frozen=True)
class IngestResult:
    tensor: CooTensor
    mode1: tuple[str, ...]
    mode2: tuple[str, ...]
    first_bin: int
    rejects: tuple[tuple[int, str, str], ...]
    n_rows: int

    def dictionaries(self) -> dict:
        """JSON form of the category dictionaries; index ``i`` maps to ``mode1[i]``."""
        return {"mode1": list(self.mode1), "mode2": list(self.mode2), "first_bin": self.first_bin}


def _seconds(raw: str, fmt: str) -> float:
    s = raw.strip()
    if fmt == "epoch":
        x = float(s)
        if not math.isfinite(x):
            raise ValueError(f"non-finite timestamp {raw!r}")
        return x
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def ingest(
    lines,
    spec: IngestSpec,
    dictionaries: Optional[dict] = None,
) -> IngestResult:
    """Parse an event CSV (an iterable of text lines with a header row) into a tensor.

    Categories are mapped to dense indices: entries of ``dictionaries`` keep
    their index, unseen categories are appended in sorted order. Duplicate
    coordinates are summed. Slice 0 is the earliest occupied time bin and
    empty bins inside the span stay as empty slices. Rows that fail to parse
    are returned as ``(line_number, reason, raw_row)`` records; if their share
    exceeds ``spec.reject_cap`` an :class:`IngestError` is raised.
    """
    reader = csv.DictReader(lines, delimiter=spec.delimiter)
    header = reader.fieldnames or []
    wanted = [spec.mode1_col, spec.mode2_col, spec.time_col]
    if spec.value_col is not None:
        wanted.append(spec.value_col)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise ValueError(f"columns {missing} not in CSV header {header}")

    parsed, rejects, n_rows = [], [], 0
    for rec in reader:
        n_rows += 1
        lineno = reader.line_num
        try:
            a, b = rec[spec.mode1_col], rec[spec.mode2_col]
            if a is None or b is None or not a.strip() or not b.strip():
                raise ValueError("empty category")
            tbin = math.floor(_seconds(rec[spec.time_col] or "", spec.time_format) / spec.bin_seconds)
            if spec.value_col is None:
                v = 1.0
            else:
                v = float(rec[spec.value_col])
                if not math.isfinite(v):
                    raise ValueError(f"non-finite value {rec[spec.value_col]!r}")
        except (ValueError, TypeError, OverflowError) as exc:
            raw = spec.delimiter.join("" if x is None else str(x) for x in rec.values())
            rejects.append((lineno, str(exc), raw))
            continue
        parsed.append((a.strip(), b.strip(), tbin, v))

    if n_rows and len(rejects) / n_rows > spec.reject_cap:
        raise IngestError(
            f"{len(rejects)} of {n_rows} rows rejected, above the cap of {spec.reject_cap:.2%}; "
            f"first bad line {rejects[0][0]}: {rejects[0][1]}"
        )

    dictionaries = dictionaries or {}
    mode1 = list(dictionaries.get("mode1", []))
    mode2 = list(dictionaries.get("mode2", []))
    for cats, col in ((mode1, 0), (mode2, 1)):
        if len(set(cats)) != len(cats):
            raise ValueError("persisted dictionary maps two indices to one category")
        known = set(cats)
        cats.extend(sorted({p[col] for p in parsed} - known))
    idx1 = {c: i for i, c in enumerate(mode1)}
    idx2 = {c: i for i, c in enumerate(mode2)}

    if not parsed:
        raise IngestError("no parseable rows")
    bins = np.array([p[2] for p in parsed], dtype=np.int64)
    first = int(bins.min())
    subs = np.column_stack([
        np.array([idx1[p[0]] for p in parsed], dtype=np.int64),
        np.array([idx2[p[1]] for p in parsed], dtype=np.int64),
        bins - first,
    ])
    vals = np.array([p[3] for p in parsed])
    K = int(bins.max()) - first + 1
    t = CooTensor.from_arrays((len(mode1), len(mode2), K), subs, vals)
    return IngestResult(t, tuple(mode1), tuple(mode2), first, tuple(rejects), n_rows)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings.

    ``labels`` is a path to an ``entity_id label`` file for mode ``mode``;
    without it no NMI is computed.
    """

    labels: Optional[str] = None
    mode: int = 1
    top_k: int = 3
    kmeans_restarts: int = 10
    nmi_average: str = "arithmetic"

    def __post_init__(self):
        if self.mode not in (1, 2):
            raise ValueError("eval mode must be 1 or 2")
        if self.top_k < 1 or self.kmeans_restarts < 1:
            raise ValueError("top_k and kmeans_restarts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run depends on.

    ``method`` is a utility kind (``"frobenius"``, ``"rank"``, ...) or
    ``"fixed-<window>"``. The single ``seed`` is mandatory and is pushed into
    every stochastic component (missing-value SGD, CP-ALS, k-means).
    """

    input: str
    method: str
    seed: int
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    quality: cpd.QualityConfig = field(default_factory=cpd.QualityConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_tensor: Optional[str] = None
    out_map: Optional[str] = None
    report: Optional[str] = None

    def __post_init__(self):
        parse_method(self.method)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        object.__setattr__(self, "utility", replace(self.utility, rng_seed=self.seed))
        object.__setattr__(
            self, "quality", replace(self.quality, als=replace(self.quality.als, seed=self.seed))
        )

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "method": self.method,
            "seed": self.seed,
            "utility": self.utility.to_dict(),
            "quality": self.quality.to_dict(),
            "eval": asdict(self.eval),
            "out_tensor": self.out_tensor,
            "out_map": self.out_map,
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for key in ("input", "method", "seed"):
            if key not in d:
                raise ValueError(f"run config lacks required field {key!r}")
        return cls(
            input=d.pop("input"),
            method=d.pop("method"),
            seed=d.pop("seed"),
            utility=UtilityConfig.from_dict(d.pop("utility", {})),
            quality=cpd.QualityConfig.from_dict(d.pop("quality", {})),
            eval=EvalConfig(**d.pop("eval", {})),
            **d,
        )


def parse_method(method: str):
    """Return ``("fixed", window)`` or ``("greedy", UtilityKind)``."""
    if method.startswith("fixed-"):
        try:
            w = int(method[len("fixed-"):])
        except ValueError:
            raise ValueError(f"bad baseline window in {method!r}") from None
        if w < 1:
            raise ValueError("baseline window must be >= 1")
        return "fixed", w
    return "greedy", UtilityKind.parse(method)


def sweep_methods(windows: Sequence[int] = BASELINE_WINDOWS) -> list[str]:
    return [k.value for k in UtilityKind] + [f"fixed-{w}" for w in windows]


# ---------------------------------------------------------------- stages


def _boundaries_1based(w: AggregationMap) -> list[list[int]]:
    return [[s + 1, e + 1] for s, e in w.boundaries]


def aggregate(t: CooTensor, method: str, ucfg: Optional[UtilityConfig] = None):
    """Aggregate ``t`` by ``method``; returns ``(Y, W, report_fragment)``."""
    how, arg = parse_method(method)
    start = time.perf_counter()
    if how == "fixed":
        Y, W = icebreaker.fixed_aggregate(t, arg)
        extra = {"utility": "fixed", "window": arg, "config": None}
    else:
        ucfg = ucfg or UtilityConfig()
        res = icebreaker.run(t, arg, ucfg)
        W = res.map
        Y = mode3_product(t, W)
        extra = {"utility": arg.value, "config": ucfg.to_dict(), "n_evaluations": res.n_evaluations}
    elapsed = time.perf_counter() - start
    frag = {
        "schema_version": SCHEMA_VERSION,
        "method": method,
        **extra,
        "K": W.K,
        "K_star": W.K_star,
        "boundaries": _boundaries_1based(W),
        "runtime_ms": elapsed * 1e3,
    }
    return Y, W, frag


def evaluate_tensor(
    Y: CooTensor,
    qcfg: cpd.QualityConfig,
    ecfg: EvalConfig,
    labels: Optional[ev.LabelVector] = None,
    W: Optional[AggregationMap] = None,
    seed: int = 0,
) -> dict:
    """Rank search, decomposition at the chosen rank and the evaluation metrics."""
    try:
        quality = cpd.quality_search(Y, qcfg)
    except Exception as exc:
        raise StageError("quality", exc) from exc
    try:
        if labels is not None:
            frag = ev.nmi_pipeline(
                Y, labels, ecfg.mode, quality, seed=seed, als=qcfg.als,
                restarts=ecfg.kmeans_restarts, average=ecfg.nmi_average,
            )
            f = frag["factors"]
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", cpd.IllConditionedWarning)
                f = cpd.cp_als(
                    Y, quality.best_rank, max_iters=qcfg.als.max_iters, tol=qcfg.als.tol,
                    seed=qcfg.als.seed, n_restarts=qcfg.als.n_restarts,
                )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            e1 = ev.entropy_coverage(f, 1, ecfg.top_k)
            e2 = ev.entropy_coverage(f, 2, ecfg.top_k)
    except Exception as exc:
        raise StageError("eval", exc) from exc
    report = {
        "rank": quality.best_rank,
        "corcondia": quality.corcondia,
        "entropy_mode1": e1,
        "entropy_mode2": e2,
    }
    if W is not None:
        report["aggregation_ratio"] = ev.aggregation_ratio(W)
    if labels is not None:
        score = frag["nmi"]
        report["nmi"] = score
        report["nmi_mode"] = ecfg.mode
        report["nmi_average"] = ecfg.nmi_average
        report["corcondia_nmi_ratio"] = {
            "value": (quality.corcondia / 100.0) / score if score > 0 else None,
            "normative": False,
        }
    return {"quality": quality.to_dict(), "eval": report}


def run_pipeline(t: CooTensor, cfg: RunConfig, labels: Optional[ev.LabelVector] = None) -> tuple:
    """In-memory pipeline; returns ``(Y, W, report)``."""
    start = time.perf_counter()
    try:
        Y, W, report = aggregate(t, cfg.method, cfg.utility)
    except Exception as exc:
        raise StageError("aggregate", exc) from exc
    report["config"] = cfg.to_dict()
    report.update(evaluate_tensor(Y, cfg.quality, cfg.eval, labels, W, seed=cfg.seed))
    report["total_runtime_ms"] = (time.perf_counter() - start) * 1e3
    return Y, W, report


def pipeline(cfg: RunConfig) -> dict:
    """Load inputs named in ``cfg``, run, and write any requested outputs."""
    try:
        t = io.read_coo(cfg.input)
        labels = None
        if cfg.eval.labels is not None:
            labels = io.read_labels(cfg.eval.labels, t.shape[cfg.eval.mode - 1])
    except Exception as exc:
        raise StageError("load", exc) from exc
    Y, W, report = run_pipeline(t, cfg, labels)
    try:
        if cfg.out_tensor:
            io.write_coo(Y, cfg.out_tensor)
        if cfg.out_map:
            io.write_map(W, cfg.out_map)
        if cfg.report:
            io.dump_json(report, cfg.report)
    except Exception as exc:
        raise StageError("write", exc) from exc
    return report


def strip_runtimes(report):
    """Copy of a report without wall-clock fields, for reproducibility checks."""
    if isinstance(report, dict):
        return {k: strip_runtimes(v) for k, v in report.items() if "runtime" not in k}
    if isinstance(report, list):
        return [strip_runtimes(v) for v in report]
    return report
