import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from subpop.data import Dataset, GaussianSubpop, synth_gaussian_subpops
from subpop.defenses import (TABLE_COLUMNS, SeverClassifier, TrimClassifier, activation_clustering,
                             evaluate_defense, sever, sever_scores, spectral_signature_scores,
                             spectral_signatures, trim)
from subpop.models import ModelParams, SoftmaxNetwork, TrainConfig, per_example_loss, train

CFG = TrainConfig(learning_rate=0.1, epochs=60, batch_size=16, l2_reg=0.01)


def clean_blobs(per=40, seed=0):
    return synth_gaussian_subpops([GaussianSubpop([-3, 0], 0.7, per, 0), GaussianSubpop([3, 0], 0.7, per, 1)],
                                  seed=seed)


def with_outliers(data, m):
    # far out on the class-1 side but labelled 0
    P = Dataset(np.tile([[30.0, 0.0]], (m, 1)), np.zeros(m, dtype=int), 2, poison=np.ones(m, dtype=bool),
                bounds=data.bounds)
    return data.concat(P)


def test_trim_m_zero_is_plain_training():
    d = clean_blobs()
    out = trim(d, (), CFG, 0)
    assert out.removed_indices == frozenset()
    np.testing.assert_array_equal(out.final_model.theta, train(d, (), CFG).theta)


def test_trim_removes_planted_outliers():
    d = with_outliers(clean_blobs(), 4)
    first = train(d, (), CFG)
    losses = per_example_loss(first, d.X, d.y)
    assert losses[d.poison].min() > losses[~d.poison].max()
    out = trim(d, (), CFG, 4)
    assert out.found_fraction == 1.0
    assert out.removed_indices == frozenset(np.flatnonzero(d.poison).tolist())


@settings(max_examples=10, deadline=None)
@given(m=st.integers(0, 10), T=st.integers(1, 4), seed=st.integers(0, 100))
def test_trim_kept_size_and_iterations(m, T, seed):
    d = with_outliers(clean_blobs(20, seed), 3)
    cfg = TrainConfig(epochs=5, seed=seed)
    out = trim(d, (), cfg, m, T)
    assert len(out.kept_indices) == len(d) - m
    assert len(out.removed_indices) == m
    assert 1 <= out.n_iter <= T


def test_trim_fixpoint_is_stable():
    d = with_outliers(clean_blobs(), 4)
    out = trim(d, (), CFG, 4, max_iter=10)
    assert out.converged
    again = trim(d, (), CFG, 4, max_iter=10, init_kept=out.kept_indices)
    assert again.n_iter == 1
    np.testing.assert_array_equal(again.kept_indices, out.kept_indices)


def test_trim_errors():
    d = clean_blobs(5)
    with pytest.raises(ValueError):
        trim(d, (), CFG, len(d))
    with pytest.raises(ValueError):
        trim(d, (), CFG, 1, max_iter=0)


def test_sever_m_zero_is_plain_training():
    d = clean_blobs()
    out = sever(d, (), CFG, 0)
    assert not out.removed_indices
    np.testing.assert_array_equal(out.final_model.theta, train(d, (), CFG).theta)


def test_sever_single_gross_outlier_scores_highest():
    G = np.random.default_rng(0).normal(size=(40, 5)) * 0.1
    G[7] += 50.0
    assert int(np.argmax(sever_scores(G))) == 7


def dense_svd_scores(G):
    C = G - G.mean(axis=0)
    _, _, Vt = np.linalg.svd(C, full_matrices=True)
    return (C @ Vt[0]) ** 2


@pytest.mark.parametrize("shape", [(30, 10), (8, 20)])
def test_sever_scores_match_dense_svd(shape):
    G = np.random.default_rng(1).normal(size=shape)
    np.testing.assert_allclose(sever_scores(G), dense_svd_scores(G), atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100))
def test_sever_scores_translation_invariant(seed, shift):
    G = np.random.default_rng(seed).normal(size=(12, 4))
    np.testing.assert_allclose(sever_scores(G + shift), sever_scores(G), atol=1e-7)


def test_sever_degenerate_gradients_warn_and_keep_all():
    # all points identical: per-example gradients coincide
    d = Dataset(np.ones((10, 2)), np.zeros(10, dtype=int), 2)
    with pytest.warns(RuntimeWarning):
        out = sever(d, (), TrainConfig(epochs=2), 2)
    assert not out.removed_indices and out.warning


def test_sever_removes_outliers():
    d = with_outliers(clean_blobs(), 2)
    out = sever(d, (), CFG, 2)
    assert out.found_fraction == 1.0


def shifted_cluster(n=100, k=10, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    X[:k] += [6.0, 0.0, 0.0]
    return Dataset(X, np.zeros(n, dtype=int), 2)


def identity_model(d):
    return ModelParams((d, 2), np.zeros(2 * d + 2))


def test_spectral_signature_scores_top_are_planted():
    d = shifted_cluster()
    s = spectral_signature_scores(d.X)
    assert set(np.argsort(-s)[:10].tolist()) == set(range(10))


def test_spectral_signatures_budget_exact():
    d = shifted_cluster()
    removed = spectral_signatures(d, identity_model(3), 0)
    assert len(removed) / len(d) == 0.15
    assert set(range(10)) <= set(removed.tolist())
    assert len(spectral_signatures(d, identity_model(3), 0, expected_fraction=0.0)) == 0


def test_spectral_signatures_split_by_class():
    rng = np.random.default_rng(0)
    d = Dataset(rng.normal(size=(60, 2)), [0] * 40 + [1] * 20, 2)
    removed = spectral_signatures(d, identity_model(2), 0)
    assert len(removed) == 9
    assert np.sum(d.y[removed] == 0) == 6 and np.sum(d.y[removed] == 1) == 3


def test_activation_clustering_small_cluster():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(90, 3)), rng.normal(size=(10, 3)) + [12, 0, 0]])
    d = Dataset(X, np.zeros(100, dtype=int), 2)
    removed = activation_clustering(d, identity_model(3), 0)
    assert removed.tolist() == list(range(90, 100))


def test_activation_clustering_balanced_keeps_all():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(50, 3)), rng.normal(size=(50, 3)) + [12, 0, 0]])
    d = Dataset(X, np.zeros(100, dtype=int), 2)
    assert len(activation_clustering(d, identity_model(3), 0)) == 0


def test_evaluate_defense_bookkeeping():
    d = clean_blobs()
    m = train(d, (), CFG)
    out = evaluate_defense(m, m, m, d, type("F", (), {"mask": staticmethod(lambda t: t.y == 1)})(),
                           removed_indices=[1, 2, 3], poison_indices=[2, 3], n_train=10)
    assert out.found_fraction == 1.0 and out.removed_fraction == 0.3
    assert out.target_before == out.target_after == 0.0
    assert tuple(out.table_row(1.0)) == TABLE_COLUMNS
    with pytest.raises(ValueError):
        evaluate_defense(m, m, m, d, None, [11], [], 10)


def test_filtering_classifiers():
    d = with_outliers(clean_blobs(), 4)
    base = SoftmaxNetwork(learning_rate=0.1, epochs=60, batch_size=16, l2_reg=0.01)
    for cls in (TrimClassifier, SeverClassifier):
        est = cls(base, n_remove=4)
        assert clone(est).get_params()["n_remove"] == 4
        est.fit(d.X, d.y)
        assert set(est.removed_.tolist()) == set(range(80, 84))
        assert est.score(d.X[:80], d.y[:80]) >= 0.99
