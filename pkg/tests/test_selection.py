import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from subpop.attacks import AttackConfig, label_flip
from subpop.data import Dataset, GaussianSubpop, synth_gaussian_subpops
from subpop.metrics import target_damage
from subpop.models import ModelParams, TrainConfig, init_params, train
from subpop.selection import (AnnotationFilter, ClusterMatch, ClusterModel, cluster_match,
                              feature_match, filter_from_dict, kmeans, pca_fit, pca_transform,
                              pick_cluster, rank_filters)


def test_feature_match_masks():
    aux = Dataset(np.zeros((3, 1)), [0, 1, 0], 2, annotations=["A", "B", "A"])
    f = feature_match(aux, "A")
    np.testing.assert_array_equal(f.mask(aux), [True, False, True])
    assert f(aux[1]) == 0 and f(aux[0]) == 1
    with pytest.raises(ValueError):
        feature_match(aux, "C")


def test_pca_line_reconstruction():
    t = np.linspace(-3, 3, 25)
    X = np.column_stack([t, 2 * t, -t]) + np.array([1.0, 2.0, 3.0])
    p = pca_fit(X, 1)
    Z = pca_transform(p, X)
    np.testing.assert_allclose(Z @ p.components + p.mean, X, atol=1e-10)


def test_pca_full_rank_is_isometry():
    X = np.random.default_rng(0).normal(size=(30, 4))
    p = pca_fit(X, 4)
    Z = pca_transform(p, X)
    D1 = np.linalg.norm(X[:, None] - X[None], axis=2)
    D2 = np.linalg.norm(Z[:, None] - Z[None], axis=2)
    np.testing.assert_allclose(D1, D2, atol=1e-10)


def test_pca_matches_covariance_eigendecomposition():
    X = np.random.default_rng(1).normal(size=(50, 5)) @ np.diag([5, 3, 2, 1, 0.5])
    p = pca_fit(X, 3)
    w, V = np.linalg.eigh(np.cov(X, rowvar=False))
    w, V = w[::-1], V[:, ::-1]
    np.testing.assert_allclose(p.explained_variance, w[:3], rtol=1e-10)
    for i in range(3):
        assert abs(abs(p.components[i] @ V[:, i]) - 1) < 1e-10


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_fit(np.ones((1, 3)), 1)
    with pytest.raises(ValueError):
        pca_fit(np.ones((5, 3)), 4)


def test_kmeans_two_pairs():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    km = kmeans(X, 2, seed=0)
    assert km.labels[0] == km.labels[1] != km.labels[2] == km.labels[3]
    assert math.isclose(km.inertia, 1.0, rel_tol=1e-12)


def test_kmeans_k_equals_n():
    X = np.random.default_rng(0).normal(size=(6, 2))
    assert kmeans(X, 6).inertia == 0.0


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)


def brute_force_inertia(X, k):
    labels = np.array(list(itertools.product(range(k), repeat=len(X))), dtype=np.int8)
    total = np.zeros(len(labels))
    sq = (X ** 2).sum(axis=1)
    for j in range(k):
        M = (labels == j).astype(float)
        cnt = M.sum(axis=1)
        s = M @ X
        with np.errstate(invalid="ignore", divide="ignore"):
            part = M @ sq - (s ** 2).sum(axis=1) / cnt
        total += np.where(cnt > 0, part, 0.0)
    # only partitions using every cluster are valid k-clusterings
    full = np.all([(labels == j).any(axis=1) for j in range(k)], axis=0)
    return total[full].min()


def test_kmeans_reaches_brute_force_optimum():
    X = np.random.default_rng(3).normal(size=(12, 2)) + np.repeat([[0, 0], [4, 0], [2, 4]], 4, axis=0)
    opt = brute_force_inertia(X, 3)
    assert abs(kmeans(X, 3, seed=0).inertia - opt) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 40), k=st.integers(1, 5))
def test_kmeans_inertia_monotone(seed, n, k):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    km = kmeans(X, min(k, n), seed=seed, n_init=2)
    h = km.history
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(h, h[1:]))
    assert math.isclose(h[-1], km.inertia)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 30), d=st.integers(1, 6))
def test_pca_components_orthonormal(seed, n, d):
    X = np.random.default_rng(seed).normal(size=(n, d))
    r = min(n, d)
    p = pca_fit(X, r)
    C = p.components
    np.testing.assert_allclose(C @ C.T, np.eye(r), atol=1e-9)
    assert np.all(np.diff(p.explained_variance) <= 1e-9)


def three_blobs(seed=0):
    return synth_gaussian_subpops([GaussianSubpop([-8, 0], 0.5, 40, 0), GaussianSubpop([0, 8], 0.5, 40, 1),
                                   GaussianSubpop([8, 0], 0.5, 40, 0)], seed=seed)


def test_cluster_match_recovers_blobs():
    aux = three_blobs()
    filters, model = cluster_match(aux, init_params((2, 2)), layer=0, r=2, k_cluster=3, seed=0)
    labels = model.assign(aux.X)
    assert adjusted_rand_score(aux.subpop_ids, labels) == 1.0
    assert len(filters) == 3


def test_cluster_match_single_cluster_selects_all():
    aux = three_blobs()
    filters, _ = cluster_match(aux, init_params((2, 2)), layer=0, r=2, k_cluster=1)
    assert filters[0].mask(aux).all()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), k=st.integers(1, 8))
def test_cluster_filters_partition(seed, k):
    aux = three_blobs(seed)
    filters, _ = cluster_match(aux, init_params((2, 2)), layer=0, r=2, k_cluster=k, seed=seed, n_init=2)
    M = np.array([f.mask(aux) for f in filters])
    np.testing.assert_array_equal(M.sum(axis=0), 1)
    # evaluating twice gives the same answer
    np.testing.assert_array_equal(M, np.array([f.mask(aux) for f in filters]))


def test_cluster_filter_serialization_roundtrip():
    aux = three_blobs()
    surrogate = train(aux, (4,), TrainConfig(epochs=3))
    filters, model = cluster_match(aux, surrogate, layer=1, r=3, k_cluster=4)
    for f in filters:
        g = filter_from_dict(f.to_dict())
        np.testing.assert_array_equal(f.mask(aux), g.mask(aux))
        assert f(aux[0]) == g(aux[0])
    m2 = ClusterModel.from_dict(__import__("json").loads(model.to_json()))
    np.testing.assert_array_equal(m2.assign(aux.X), model.assign(aux.X))


def test_cluster_match_estimator():
    aux = three_blobs()
    est = ClusterMatch(n_components=2, n_clusters=3).fit(aux.X)
    assert adjusted_rand_score(aux.subpop_ids, est.predict(aux.X)) == 1.0
    assert est.transform(aux.X).shape == (120, 2)
    assert est.get_params()["n_clusters"] == 3


def sigmoid_inv(p):
    return math.log(p / (1 - p))


def test_pick_lowest_confidence():
    # p(y=1) = sigmoid(x): tag a sits at confidence 0.99, tag b at 0.55
    X = np.array([[sigmoid_inv(0.99)]] * 3 + [[sigmoid_inv(0.55)]] * 3)
    aux = Dataset(X, [1] * 6, 2, annotations=["a"] * 3 + ["b"] * 3)
    sur = ModelParams((1, 2), np.array([0.0, 1.0, 0.0, 0.0]))
    filters = [AnnotationFilter("a"), AnnotationFilter("b")]
    order, scores = rank_filters(filters, aux, sur, "lowest_confidence")
    assert pick_cluster(filters, aux, sur, "lowest_confidence") == 1
    np.testing.assert_allclose(scores, [0.99, 0.55], atol=1e-12)


def test_pick_smallest():
    aux = Dataset(np.zeros((47, 1)), [0] * 47, 2, annotations=["a"] * 40 + ["b"] * 7)
    assert pick_cluster([AnnotationFilter("a"), AnnotationFilter("b")], aux, None, "smallest") == 1


def test_pick_skips_empty_filters():
    aux = Dataset(np.zeros((3, 1)), [0] * 3, 2, annotations=["a"] * 3)
    order, _ = rank_filters([AnnotationFilter("zz"), AnnotationFilter("a")], aux, None, "smallest")
    assert list(order) == [1]


def test_pick_highest_surrogate_damage_boundary_blob():
    # two far blobs and one blob straddling the decision boundary
    spec = [GaussianSubpop([-6, 0], 0.5, 30, 0, "left"), GaussianSubpop([6, 0], 0.5, 30, 1, "right")]
    base = synth_gaussian_subpops(spec, seed=0)
    rng = np.random.default_rng(1)
    mid = rng.normal(size=(30, 2)) * [1.0, 0.5]
    mid_y = (mid[:, 0] > 0).astype(int)
    aux = base.concat(Dataset(mid, mid_y, 2, annotations=["mid"] * 30, subpop_ids=[2] * 30))
    cfg = TrainConfig(learning_rate=0.05, epochs=60, l2_reg=0.001, optimizer="adam")
    sur = train(aux, (), cfg)
    filters = [AnnotationFilter(t) for t in ("left", "right", "mid")]
    order, scores = rank_filters(filters, aux, sur, "highest_surrogate_damage", alpha=0.5, config=cfg)
    # independent simulation of the per-cluster flip
    oracle = []
    for f in filters:
        p = label_flip(aux, f, AttackConfig(poison_rate=0.5), sur, seed=0)
        pm = train(aux.concat(p.to_dataset(aux)), (), cfg)
        oracle.append(target_damage(sur, pm, aux.subset(f.mask(aux)), None))
    np.testing.assert_allclose(scores, oracle, atol=1e-12)
    assert int(np.argmax(oracle)) == 2 and order[0] == 2
