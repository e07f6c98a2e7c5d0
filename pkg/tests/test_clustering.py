import numpy as np
import pytest

from neuronscope.clustering import (
    ClusterAssignment, cluster_mask, coefficient_scores, kmeans_1d, rank_clusters,
)
from neuronscope.model import ModelConfig, activate
from neuronscope.model_io import synth_model

PARTITION_KS = [2, 5, 10, 20, 33, 50, 75, 100]


@pytest.fixture(scope="module")
def wide_model():
    return synth_model(1, ModelConfig(2, 8, 2, 64, 50, 32))


@pytest.fixture(scope="module")
def bimodal():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(0.0, 0.05, 40), rng.normal(5.0, 0.05, 24)])
    return rng.permutation(x)


def test_bimodal_partition_recovered(bimodal):
    a = kmeans_1d(bimodal, 2, seed=0)
    truth = bimodal > 2.5
    same = np.array_equal(a.labels == a.labels[np.argmax(bimodal)], truth)
    assert same
    assert sorted(a.sizes().tolist()) == [24, 40]


def test_seeded_determinism(bimodal):
    a, b = kmeans_1d(bimodal, 5, seed=9), kmeans_1d(bimodal, 5, seed=9)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)


@pytest.mark.parametrize("k", PARTITION_KS)
def test_partition_invariant(wide_model, k):
    x = coefficient_scores(wide_model, np.random.default_rng(0).normal(size=8))
    assert x.size == 128
    a = kmeans_1d(x, k, seed=0)
    assert a.sizes().sum() == x.size
    assert a.labels.min() >= 0 and a.labels.max() < k


def test_assignment_is_voronoi(rng):
    x = rng.normal(size=300)
    a = kmeans_1d(x, 7, seed=1)
    dist = np.abs(x[:, None] - a.centroids[None, :])
    assert np.all(dist[np.arange(x.size), a.labels] <= dist.min(axis=1) + 1e-12)


def test_wcss_beats_random_assignments(rng):
    x = rng.normal(size=200)
    a = kmeans_1d(x, 4, seed=0)
    for _ in range(100):
        labels = rng.integers(0, 4, size=x.size)
        wcss = sum(((x[labels == u] - x[labels == u].mean()) ** 2).sum() for u in range(4) if np.any(labels == u))
        assert a.inertia <= wcss + 1e-12


@pytest.mark.parametrize("k", [1, 129])
def test_k_out_of_range(wide_model, k):
    with pytest.raises(ValueError):
        kmeans_1d(np.zeros(128), k)


def test_constant_scores_do_not_crash():
    a = kmeans_1d(np.ones(10), 3, seed=0)
    assert a.sizes().sum() == 10 and a.inertia == 0.0


def test_literal_mode_formula(wide_model, rng):
    c = rng.normal(size=8)
    x = coefficient_scores(wide_model, c, mode="literal")
    expected = np.concatenate([activate(l.w_fc1 @ c) for l in wide_model.layers])
    assert np.allclose(x, expected, atol=1e-14)
    with pytest.raises(ValueError):
        coefficient_scores(wide_model, c, mode="other")


def test_rank_and_mask():
    a = ClusterAssignment(3, np.array([0, 1, 1, 2, 0, 1]), np.array([0.0, 1.0, 2.0]), 0)
    effects = [1.0, 5.0, 3.0, 0.5, 1.0, 4.0]
    r = rank_clusters(a, effects)
    assert r.order == (1, 0, 2) and r.means[1] == pytest.approx(4.0)
    assert list(cluster_mask(a, r, "top", d_ffn=3)) == [(0, 1), (0, 2), (1, 2)]
    assert list(cluster_mask(a, r, "complement", d_ffn=3)) == [(0, 0), (1, 0), (1, 1)]
    assert list(cluster_mask(a, r, 2, d_ffn=3)) == [(1, 0)]
    with pytest.raises(ValueError):
        cluster_mask(a, r, 5, d_ffn=3)


def test_empty_cluster_excluded():
    a = ClusterAssignment(3, np.array([0, 0, 2]), np.array([0.0, 9.0, 1.0]), 0)
    r = rank_clusters(a, [1.0, 1.0, 2.0])
    assert r.empty == (1,) and 1 not in r.order


def test_json_round_trip(bimodal):
    a = kmeans_1d(bimodal, 3, seed=2)
    b = ClusterAssignment.from_json(a.to_json())
    assert np.array_equal(a.labels, b.labels) and b.k == 3
