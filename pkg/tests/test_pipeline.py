import io as stdio
import json

import numpy as np
import pytest

from adagran import cpd, datagen
from adagran import io
from adagran import pipeline as pl
from adagran.pipeline import IngestSpec, RunConfig

SPEC = IngestSpec(mode1_col="src", mode2_col="dst", time_col="t")


def _csv(rows, header="src,dst,t"):
    return stdio.StringIO(header + "\n" + "\n".join(rows) + "\n")


# ---------------------------------------------------------------- ingest


def test_ingest_duplicates_merge():
    res = pl.ingest(_csv(["a,b,0", "a,b,10", "b,a,20"]), SPEC)
    t = res.tensor
    assert t.nnz == 2
    assert sorted(t.vals.tolist()) == [1.0, 2.0]


def test_ingest_span_keeps_empty_slices():
    res = pl.ingest(_csv(["a,b,0", "a,c,18000"]), SPEC)
    assert res.tensor.K == 6
    assert res.tensor.slice_nnz().tolist() == [1, 0, 0, 0, 0, 1]


def test_ingest_malformed_timestamp_rejected_with_line():
    rows = [f"a,b,{3600 * k}" for k in range(200)]
    rows[4] = "a,b,yesterday"
    res = pl.ingest(_csv(rows), SPEC)
    assert len(res.rejects) == 1
    lineno, reason, raw = res.rejects[0]
    assert lineno == 6  # header is line 1
    assert "yesterday" in raw


def test_ingest_reject_cap_aborts():
    with pytest.raises(pl.IngestError, match="cap"):
        pl.ingest(_csv(["a,b,0", "a,b,zzz"]), SPEC)


def test_ingest_no_rows():
    with pytest.raises(pl.IngestError):
        pl.ingest(_csv([]), SPEC)


def test_ingest_missing_column():
    with pytest.raises(ValueError, match="not in CSV header"):
        pl.ingest(_csv(["a,b,0"], header="src,dst,time"), SPEC)


def test_ingest_values_and_iso_times():
    spec = IngestSpec("u", "v", "ts", value_col="w", time_format="iso8601", bin_seconds=86400)
    lines = _csv(["x,y,2024-01-01T05:00:00Z,2.5", "x,z,2024-01-03T00:00:00,1.0"], header="u,v,ts,w")
    res = pl.ingest(lines, spec)
    assert res.tensor.shape == (1, 2, 3)
    assert res.tensor.vals.tolist() == [2.5, 1.0]


def test_ingest_persisted_dictionaries_are_stable():
    first = pl.ingest(_csv(["b,q,0", "a,p,3600"]), SPEC)
    d = json.loads(json.dumps(first.dictionaries()))
    again = pl.ingest(_csv(["b,q,0", "a,p,3600"]), SPEC, d)
    assert again.tensor.equals(first.tensor)
    grown = pl.ingest(_csv(["c,p,0", "a,p,3600"]), SPEC, d)
    assert grown.mode1 == ("a", "b", "c")


def test_ingest_spec_validation():
    with pytest.raises(ValueError):
        IngestSpec("a", "a", "t")
    with pytest.raises(ValueError):
        IngestSpec("a", "b", "t", bin_seconds=0)


# ---------------------------------------------------------------- configs


def test_run_config_requires_seed():
    with pytest.raises(ValueError, match="seed"):
        RunConfig.from_dict({"input": "x", "method": "rank"})


def test_run_config_pushes_seed_everywhere():
    cfg = RunConfig("x", "mvp", seed=17)
    assert cfg.utility.rng_seed == 17
    assert cfg.quality.als.seed == 17


def test_run_config_roundtrip():
    cfg = RunConfig("x", "fixed-10", seed=3, quality=cpd.QualityConfig(R_max=4))
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("bad", ["fixed-0", "fixed-x", "l1-norm"])
def test_bad_methods(bad):
    with pytest.raises(ValueError):
        pl.parse_method(bad)


def test_sweep_methods_count():
    methods = pl.sweep_methods()
    assert len(methods) == 10
    assert methods[-3:] == ["fixed-10", "fixed-100", "fixed-1000"]


# ---------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    d = tmp_path_factory.mktemp("gen")
    t, truth = datagen.generate(datagen.SyntheticSpec(I=12, J=12, n_epochs=4, base_window=5,
                                                      density=0.3, seed=2))
    io.write_coo(t, d / "t.coo")
    io.write_labels(truth.labels_mode1, d / "t.labels")
    return d


REPORT_KEYS = {"schema_version", "method", "utility", "config", "K", "K_star", "boundaries",
               "runtime_ms", "quality", "eval", "total_runtime_ms"}


def test_pipeline_report_schema(generated):
    cfg = RunConfig(str(generated / "t.coo"), "frobenius", seed=1,
                    quality=cpd.QualityConfig(R_max=3),
                    eval=pl.EvalConfig(labels=str(generated / "t.labels")),
                    report=str(generated / "r.json"), out_map=str(generated / "w.map"))
    report = pl.pipeline(cfg)
    assert REPORT_KEYS <= set(report)
    assert {"rank", "corcondia", "entropy_mode1", "entropy_mode2", "aggregation_ratio", "nmi",
            "corcondia_nmi_ratio"} <= set(report["eval"])
    assert report["eval"]["corcondia_nmi_ratio"]["normative"] is False
    assert io.load_json(generated / "r.json") == json.loads(json.dumps(report))
    w = io.read_map(generated / "w.map")
    assert [[s + 1, e + 1] for s, e in w.boundaries] == report["boundaries"]


@pytest.mark.parametrize("method", ["mvp", "fixed-4"])
def test_pipeline_deterministic(generated, method):
    cfg = RunConfig(str(generated / "t.coo"), method, seed=5, quality=cpd.QualityConfig(R_max=3))
    a = json.dumps(pl.strip_runtimes(pl.pipeline(cfg)), sort_keys=True)
    b = json.dumps(pl.strip_runtimes(pl.pipeline(cfg)), sort_keys=True)
    assert a == b


def test_pipeline_load_error_is_staged(tmp_path):
    with pytest.raises(pl.StageError) as err:
        pl.pipeline(RunConfig(str(tmp_path / "none.coo"), "rank", seed=0))
    assert err.value.stage == "load"


def test_strip_runtimes_nested():
    r = {"a": 1, "runtime_ms": 2, "x": [{"total_runtime_ms": 3, "b": 4}]}
    assert pl.strip_runtimes(r) == {"a": 1, "x": [{"b": 4}]}


def test_aggregate_fixed_fragment():
    t = datagen.generate(datagen.SyntheticSpec(n_epochs=2, base_window=5, seed=0))[0]
    Y, W, frag = pl.aggregate(t, "fixed-3")
    assert frag["boundaries"] == [[1, 3], [4, 6], [7, 9], [10, 10]]
    assert Y.K == W.K_star == 4
    assert np.isclose(Y.vals.sum(), t.vals.sum())
