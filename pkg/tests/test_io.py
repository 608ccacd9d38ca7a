import numpy as np
import pytest

from adagran import cpd
from adagran import io
from adagran.evaluation import LabelVector
from adagran.sparse_tensor import AggregationMap, CooTensor, from_entries


def test_coo_roundtrip(tmp_path, rng):
    X = rng.standard_normal((3, 4, 5)) * (rng.random((3, 4, 5)) < 0.4)
    t = CooTensor.from_dense(X)
    io.write_coo(t, tmp_path / "t.coo")
    assert io.read_coo(tmp_path / "t.coo").equals(t)


def test_coo_on_disk_is_one_based(tmp_path):
    io.write_coo(from_entries((2, 2, 2), [(0, 1, 1, 7.0)]), tmp_path / "t.coo")
    lines = (tmp_path / "t.coo").read_text().splitlines()
    assert lines == ["# shape 2 2 2", "1 2 2 7.0"]


def test_coo_bad_line_names_line(tmp_path):
    (tmp_path / "t.coo").write_text("# shape 2 2 2\n1 1 1 1.0\n1 x 1 2.0\n")
    with pytest.raises(io.FormatError, match=":3:"):
        io.read_coo(tmp_path / "t.coo")


def test_coo_zero_index_mentions_one_based(tmp_path):
    (tmp_path / "t.coo").write_text("# shape 2 2 2\n0 1 1 1.0\n")
    with pytest.raises(io.FormatError, match="1-based"):
        io.read_coo(tmp_path / "t.coo")


def test_coo_missing_header(tmp_path):
    (tmp_path / "t.coo").write_text("1 1 1 1.0\n")
    with pytest.raises(io.FormatError, match="shape"):
        io.read_coo(tmp_path / "t.coo")


def test_map_roundtrip(tmp_path):
    w = AggregationMap.from_cuts(10, [3, 6])
    io.write_map(w, tmp_path / "w.map")
    assert (tmp_path / "w.map").read_text().splitlines() == ["# K=10 Kstar=3", "1 1 3", "2 4 6", "3 7 10"]
    assert io.read_map(tmp_path / "w.map") == w


def test_map_count_mismatch(tmp_path):
    (tmp_path / "w.map").write_text("# K=4 Kstar=2\n1 1 4\n")
    with pytest.raises(io.FormatError, match="K\\*=2"):
        io.read_map(tmp_path / "w.map")


def test_map_invalid_partition(tmp_path):
    (tmp_path / "w.map").write_text("# K=4 Kstar=2\n1 1 2\n2 4 4\n")
    with pytest.raises(ValueError):
        io.read_map(tmp_path / "w.map")


def test_factors_roundtrip(tmp_path, rng):
    f = cpd.cp_als(CooTensor.from_dense(rng.random((3, 4, 5))), 2)
    io.write_factors(f, tmp_path / "f")
    g = io.read_factors(tmp_path / "f")
    for a, b in zip(f.factors + (f.weights,), g.factors + (g.weights,)):
        np.testing.assert_array_equal(a, b)


def test_matrix_shape_mismatch(tmp_path):
    (tmp_path / "m").write_text("# 2 2\n1 2\n")
    with pytest.raises(io.FormatError):
        io.read_matrix(tmp_path / "m")


def test_labels_roundtrip_and_tokens(tmp_path):
    lv = LabelVector([0, 1, 1, 2])
    io.write_labels(lv, tmp_path / "l")
    assert io.read_labels(tmp_path / "l") == lv
    (tmp_path / "s").write_text("2 cat\n1 dog\n3 cat\n")
    assert io.read_labels(tmp_path / "s").assignments.tolist() == [1, 0, 0]


@pytest.mark.parametrize(
    "text, match",
    [("1 a\n1 b\n", "twice"), ("1 a\n3 b\n", "without a label"), ("x a\n", "integer"), ("1\n", "entity_id")],
)
def test_labels_errors(tmp_path, text, match):
    (tmp_path / "l").write_text(text)
    with pytest.raises(io.FormatError, match=match):
        io.read_labels(tmp_path / "l")


def test_labels_out_of_range(tmp_path):
    (tmp_path / "l").write_text("1 a\n2 b\n3 a\n")
    with pytest.raises(io.FormatError, match="outside"):
        io.read_labels(tmp_path / "l", n_entities=2)


def test_edges_roundtrip(tmp_path):
    io.write_edges([(0, 1), (2, 3)], tmp_path / "e")
    assert (tmp_path / "e").read_text() == "1 2\n3 4\n"
    assert io.read_edges(tmp_path / "e") == [(0, 1), (2, 3)]


def test_json_is_sorted_and_stable(tmp_path):
    io.dump_json({"b": 1, "a": [1, 2]}, tmp_path / "r.json")
    assert (tmp_path / "r.json").read_text().startswith('{\n  "a"')
    assert io.load_json(tmp_path / "r.json") == {"a": [1, 2], "b": 1}
