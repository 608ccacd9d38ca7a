import math
import warnings

import numpy as np
import pytest
from sklearn.metrics import normalized_mutual_info_score

from adagran import cpd
from adagran import evaluation as ev
from adagran.evaluation import LabelVector
from adagran.sparse_tensor import AggregationMap, CooTensor

import oracles


# ---------------------------------------------------------------- labels


def test_label_vector_validation():
    assert LabelVector([0, 1, 1, 2]).n_labels == 3
    with pytest.raises(ValueError):
        LabelVector([0, 2, 2])
    with pytest.raises(ValueError):
        LabelVector([[0, 1]])
    lv = LabelVector.from_labels(["b", "a", "b"])
    assert lv.assignments.tolist() == [1, 0, 1]
    assert lv.n_entities == 3


# ---------------------------------------------------------------- k-means


def test_kmeans_two_clouds(rng):
    radius = 0.5
    a = rng.uniform(-radius, radius, (40, 2))
    b = rng.uniform(-radius, radius, (35, 2)) + np.array([10 * radius * 2, 0])
    X = np.vstack([a, b])[rng.permutation(75)]
    # Oracle: split by the midpoint between the cloud centres.
    truth = LabelVector.from_labels((X[:, 0] > 5 * radius).astype(int))
    got = ev.kmeans_rows(X, 2, seed=3)
    assert ev.nmi(truth, got) == 1.0


def test_kmeans_k_equals_rows(rng):
    X = rng.standard_normal((7, 3))
    res = ev.kmeans_rows(X, 7, seed=0, return_result=True)
    assert res.labels.n_labels == 7
    assert res.wcss == 0.0


def test_kmeans_same_seed_same_labels(rng):
    X = rng.standard_normal((50, 4))
    assert ev.kmeans_rows(X, 4, seed=11) == ev.kmeans_rows(X, 4, seed=11)


def test_kmeans_wcss_monotone(rng):
    X = rng.standard_normal((200, 3))
    res = ev.kmeans_rows(X, 6, seed=1, restarts=1, return_result=True)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * h[0])


def test_kmeans_labels_by_first_appearance(rng):
    X = np.vstack([np.full((3, 2), 5.0), np.zeros((3, 2)), np.full((3, 2), -5.0)])
    res = ev.kmeans_rows(X, 3, seed=0, return_result=True)
    assert res.labels.assignments.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
    np.testing.assert_allclose(res.centroids, [[5, 5], [0, 0], [-5, -5]])


def test_kmeans_fewer_distinct_points_than_k():
    # Empty clusters get reseeded; coincident centroids collapse in the end.
    X = np.array([[0.0], [0.0], [0.0], [1.0]])
    res = ev.kmeans_rows(X, 3, seed=0, return_result=True)
    assert res.wcss == 0.0
    assert res.labels.assignments.tolist() == [0, 0, 0, 1]


def test_kmeans_invalid_k():
    with pytest.raises(ValueError):
        ev.kmeans_rows(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        ev.kmeans_rows(np.zeros((3, 2)), 0)


# ---------------------------------------------------------------- NMI


def test_nmi_identical_and_permuted():
    a = LabelVector([0, 0, 1, 1, 2, 2])
    assert ev.nmi(a, a) == 1.0
    b = LabelVector([2, 2, 0, 0, 1, 1])
    assert ev.nmi(a, b) == pytest.approx(1.0, abs=1e-15)


def test_nmi_independence_large_n():
    rng = np.random.default_rng(2024)
    n = 10_000
    a = LabelVector(np.arange(n) % 2)
    b = LabelVector(rng.integers(0, 2, size=n))
    assert ev.nmi(a, b) < 0.05


def test_nmi_degenerate_cases():
    one = LabelVector(np.zeros(5, dtype=int))
    assert ev.nmi(one, one) == 1.0
    assert ev.nmi(one, LabelVector([0, 1, 0, 1, 0])) == 0.0


def test_nmi_length_mismatch():
    with pytest.raises(ValueError):
        ev.nmi(LabelVector([0, 1]), LabelVector([0, 1, 0]))


@pytest.mark.parametrize("average", ["arithmetic", "max", "min", "geometric"])
def test_nmi_matches_sklearn(average, rng):
    for _ in range(25):
        n = int(rng.integers(2, 60))
        a = LabelVector.from_labels(rng.integers(0, 4, n))
        b = LabelVector.from_labels(rng.integers(0, 5, n))
        expected = normalized_mutual_info_score(a.assignments, b.assignments, average_method=average)
        assert ev.nmi(a, b, average) == pytest.approx(expected, abs=1e-12)


def test_nmi_joint_normalization(rng):
    a = LabelVector.from_labels(rng.integers(0, 3, 40))
    b = LabelVector.from_labels(rng.integers(0, 3, 40))
    joint = np.zeros((3, 3))
    np.add.at(joint, (a.assignments, b.assignments), 1)
    p = joint / 40
    px, py = p.sum(1), p.sum(0)
    nz = p > 0
    mi = (p[nz] * np.log(p[nz] / np.outer(px, py)[nz])).sum()
    hj = -(p[nz] * np.log(p[nz])).sum()
    assert ev.nmi(a, b, "joint") == pytest.approx(mi / hj, rel=1e-12)


def test_nmi_unknown_average():
    with pytest.raises(ValueError):
        ev.nmi(LabelVector([0, 1]), LabelVector([1, 0]), "harmonic")


# ---------------------------------------------------------------- entropy coverage


def _factors(A, B=None):
    A = np.asarray(A, dtype=float)
    B = A if B is None else np.asarray(B, dtype=float)
    C = np.ones((2, A.shape[1]))
    return cpd.KruskalFactors.from_unnormalized(A, B, C)


def test_entropy_all_distinct():
    A = np.zeros((9, 3))
    for r in range(3):
        A[3 * r : 3 * r + 3, r] = [3, 2, 1]
    assert ev.entropy_coverage(_factors(A), 1, 3) == pytest.approx(math.log2(9), abs=1e-12)


def test_entropy_shared_picks():
    A = np.zeros((6, 3))
    A[:3, :] = np.array([[3, 2, 1]]).T
    assert ev.entropy_coverage(_factors(A), 1, 3) == pytest.approx(math.log2(3), abs=1e-12)


def test_entropy_rank_one(rng):
    A = rng.permutation(10).reshape(10, 1) + 1.0
    assert ev.entropy_coverage(_factors(A), 2, 4) == pytest.approx(2.0, abs=1e-12)


def test_entropy_ties_go_to_lower_index():
    A = np.ones((5, 2))
    f = _factors(A)
    # both components pick entities 0 and 1
    assert ev.entropy_coverage(f, 1, 2) == pytest.approx(1.0)


def test_entropy_clamps_top_k():
    A = np.eye(3)
    with pytest.warns(RuntimeWarning, match="clamped"):
        h = ev.entropy_coverage(_factors(A), 1, 5)
    assert h == pytest.approx(math.log2(3))


def test_entropy_matches_counting_oracle(rng):
    for _ in range(20):
        A = rng.standard_normal((12, 4))
        k = int(rng.integers(1, 5))
        counts = np.zeros(12)
        for r in range(4):
            for idx in sorted(range(12), key=lambda i: (-abs(A[i, r]), i))[:k]:
                counts[idx] += 1
        assert ev.entropy_coverage(_factors(A), 1, k) == pytest.approx(oracles.shannon_bits(counts))


def test_entropy_invalid_mode():
    with pytest.raises(ValueError):
        ev.entropy_coverage(_factors(np.eye(3)), 3, 1)


# ---------------------------------------------------------------- aggregation ratio


def test_aggregation_ratio_examples():
    assert ev.aggregation_ratio(AggregationMap.identity(10)) == 1.0
    assert ev.aggregation_ratio(AggregationMap.single(10)) == 10.0
    assert ev.aggregation_ratio(AggregationMap(10, ((0, 2), (3, 5), (6, 9)))) == pytest.approx(10 / 3)


# ---------------------------------------------------------------- pipeline


def _block_tensor(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1, 2], 5)
    A = np.eye(3)[labels] * rng.uniform(0.5, 1.5, (15, 1))
    B = np.eye(3)[labels] * rng.uniform(0.5, 1.5, (15, 1))
    C = rng.uniform(0.5, 1.5, (6, 3))
    X = np.einsum("ir,jr,kr->ijk", A, B, C)
    return CooTensor.from_dense(X), LabelVector(labels)


def test_nmi_pipeline_planted_blocks():
    t, truth = _block_tensor(0)
    q = cpd.quality_search(t, cpd.QualityConfig(R_max=4, als=cpd.AlsConfig(n_restarts=3)))
    assert q.best_rank == 3
    out = ev.nmi_pipeline(t, truth, 1, q, seed=0, als=cpd.AlsConfig(n_restarts=3))
    assert out["nmi"] == pytest.approx(1.0)
    assert out["rank"] == 3


def test_nmi_pipeline_single_label_truth():
    t, _ = _block_tensor(1)
    q = cpd.QualityResult(2, 100.0, 0.5, (), "argmax")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = ev.nmi_pipeline(t, LabelVector(np.zeros(15, dtype=int)), 2, q)
    assert out["nmi"] == 1.0


def test_nmi_pipeline_deterministic():
    t, truth = _block_tensor(2)
    q = cpd.quality_search(t, cpd.QualityConfig(R_max=3))
    a = ev.nmi_pipeline(t, truth, 2, q, seed=5)
    b = ev.nmi_pipeline(t, truth, 2, q, seed=5)
    assert a["nmi"] == b["nmi"]
    assert a["predicted"] == b["predicted"]


def test_nmi_pipeline_label_size_mismatch():
    t, _ = _block_tensor(0)
    q = cpd.QualityResult(1, 100.0, 0.5, (), "argmax")
    with pytest.raises(ValueError):
        ev.nmi_pipeline(t, LabelVector([0, 1]), 1, q)
