"""Poisoning defenses and their bookkeeping.

TRIM and SEVER alternate between fitting on a kept index set and re-scoring
every training point, keeping the ``n - m`` lowest scores until the kept set
stops changing or ``max_iter`` rounds have run. Spectral signatures and
activation clustering score a trained model's per-class representations
once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted, check_X_y

from .data import Dataset
from .metrics import collateral_damage, target_damage
from .models import (ModelParams, SoftmaxNetwork, TrainConfig, per_example_grads,
                     per_example_loss, representation, train)
from .selection import kmeans, pca_fit, pca_transform


@dataclass(frozen=True, eq=False)
class DefenseOutcome:
    final_model: ModelParams | None
    removed_indices: frozenset
    n_train: int
    n_poison: int = 0
    n_found: int = 0
    n_iter: int = 0
    converged: bool = True
    defense: str = ""
    target_before: float | None = None
    target_after: float | None = None
    collateral_after: float | None = None
    warning: str | None = None
    kept_indices: np.ndarray = field(default=None, repr=False)

    @property
    def found_fraction(self) -> float:
        """Share of poisons among the removed points (0 when there are no poisons)."""
        return self.n_found / self.n_poison if self.n_poison else 0.0

    @property
    def removed_fraction(self) -> float:
        return len(self.removed_indices) / self.n_train if self.n_train else 0.0

    def table_row(self, alpha: float | None = None) -> dict:
        return {
            "defense": self.defense,
            "alpha": alpha,
            "found": self.found_fraction,
            "pct_removed": self.removed_fraction,
            "target_before": self.target_before,
            "target_after": self.target_after,
            "collateral_damage": self.collateral_after,
        }


TABLE_COLUMNS = ("defense", "alpha", "found", "pct_removed", "target_before", "target_after",
                 "collateral_damage")


def _outcome(data: Dataset, model, kept, n_iter, converged, name, warning=None) -> DefenseOutcome:
    kept = np.sort(np.asarray(kept, dtype=int))
    removed = np.setdiff1d(np.arange(len(data)), kept)
    return DefenseOutcome(
        final_model=model,
        removed_indices=frozenset(removed.tolist()),
        n_train=len(data),
        n_poison=int(data.poison.sum()),
        n_found=int(data.poison[removed].sum()),
        n_iter=n_iter,
        converged=converged,
        defense=name,
        warning=warning,
        kept_indices=kept,
    )


def _iterative_filter(data, hidden, cfg, m, max_iter, score_fn, name, init_kept=None):
    n = len(data)
    if not 0 <= m < n:
        raise ValueError(f"attack count m={m} must satisfy 0 <= m < n={n}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    kept = np.arange(n) if init_kept is None else np.sort(np.asarray(init_kept, dtype=int))
    prev = None
    it = 0
    model = None
    warning = None
    while it < max_iter and (prev is None or not np.array_equal(kept, prev)):
        prev = kept
        it += 1
        model = train(data.subset(kept), hidden, cfg)
        scores = score_fn(model)
        if scores is None:
            warning = "degenerate scores; nothing removed"
            if len(prev) != n:
                model = train(data, hidden, cfg)
            kept = prev = np.arange(n)
            break
        kept = np.sort(np.argsort(scores, kind="stable")[:n - m])
    converged = prev is not None and np.array_equal(kept, prev)
    return _outcome(data, model, kept, it, converged, name, warning)


def trim(data: Dataset, hidden: Sequence[int] = (), cfg: TrainConfig = TrainConfig(), m: int = 0,
         max_iter: int = 5, init_kept=None) -> DefenseOutcome:
    """Iteratively refit on the ``n - m`` lowest-loss training points.

    Returns the last fitted model; ``removed_indices`` is the complement of
    the final kept set. ``init_kept`` overrides the initial index set (all
    points by default).
    """
    return _iterative_filter(data, hidden, cfg, m, max_iter,
                             lambda f: per_example_loss(f, data.X, data.y), "TRIM", init_kept)


def sever_scores(G) -> np.ndarray:
    """Squared projection of centered rows of ``G`` on their top singular direction.

    Returns ``None`` when the centered matrix vanishes (up to rounding). The top
    direction is taken from an eigendecomposition of the Gram matrix.
    """
    G = np.asarray(G, dtype=float)
    C = G - G.mean(axis=0)
    if np.abs(C).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(G).max(initial=0.0)):
        return None
    if C.shape[1] <= C.shape[0]:
        w, V = np.linalg.eigh(C.T @ C)
        v = V[:, -1]
    else:
        w, U = np.linalg.eigh(C @ C.T)
        v = C.T @ U[:, -1]
        v /= np.linalg.norm(v)
    return (C @ v) ** 2


def sever(data: Dataset, hidden: Sequence[int] = (), cfg: TrainConfig = TrainConfig(), m: int = 0,
          max_iter: int = 5, init_kept=None) -> DefenseOutcome:
    """Iteratively drop the ``m`` points with the largest SEVER gradient scores.

    Per-example parameter gradients (without regularization) of every
    training point are taken at the current fit.
    """
    def score(f):
        s = sever_scores(per_example_grads(f, data.X, data.y))
        if s is None:
            warnings.warn("all per-example gradients are identical; SEVER removes nothing", RuntimeWarning)
        return s

    if m == 0:
        return _iterative_filter(data, hidden, cfg, 0, max_iter, lambda f: np.zeros(len(data)), "SEVER",
                                 init_kept)
    return _iterative_filter(data, hidden, cfg, m, max_iter, score, "SEVER", init_kept)


def _largest_remainder(total: int, sizes: np.ndarray) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=int)
    n = sizes.sum()
    if n == 0 or total == 0:
        return np.zeros_like(sizes)
    exact = total * sizes / n
    alloc = np.floor(exact).astype(int)
    rem = total - alloc.sum()
    order = np.argsort(-(exact - alloc), kind="stable")
    alloc[order[:rem]] += 1
    return np.minimum(alloc, sizes)


def spectral_signature_scores(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    C = R - R.mean(axis=0)
    _, _, Vt = np.linalg.svd(C, full_matrices=False)
    return (C @ Vt[0]) ** 2


def spectral_signatures(data: Dataset, model: ModelParams, layer: int, expected_fraction: float = 0.1,
                        epsilon_multiplier: float = 1.5) -> np.ndarray:
    """Per-class spectral-signature removal; returns sorted removed indices.

    The overall budget ``round(epsilon_multiplier * expected_fraction * n)``
    (15% by default) is split across classes in proportion to class size by
    largest remainders; each class drops its highest-scoring points.
    """
    if expected_fraction < 0 or epsilon_multiplier < 0:
        raise ValueError("expected_fraction and epsilon_multiplier must be non-negative")
    R = representation(model, data.X, layer)
    counts = np.bincount(data.y, minlength=data.n_classes)
    if np.any(counts == 1):
        raise ValueError("every represented class needs at least 2 points")
    budget = int(np.floor(epsilon_multiplier * expected_fraction * len(data) + 0.5 + 1e-9))
    alloc = _largest_remainder(min(budget, len(data)), counts)
    removed = []
    for c in range(data.n_classes):
        if alloc[c] == 0:
            continue
        idx = np.flatnonzero(data.y == c)
        s = spectral_signature_scores(R[idx])
        removed.extend(idx[np.argsort(-s, kind="stable")[:alloc[c]]].tolist())
    return np.sort(np.array(removed, dtype=int))


def activation_clustering(data: Dataset, model: ModelParams, layer: int, n_components: int = 3,
                          size_threshold: float = 0.35, seed: int = 0) -> np.ndarray:
    """Per-class 2-means on PCA-reduced activations; drop small clusters.

    The smaller of the two clusters is removed when it holds less than
    ``size_threshold`` of its class. Classes with fewer than 2 points are
    skipped.
    """
    R = representation(model, data.X, layer)
    removed = []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.y == c)
        if len(idx) < 2:
            continue
        r = min(n_components, len(idx), R.shape[1])
        pca = pca_fit(R[idx], r)
        km = kmeans(pca_transform(pca, R[idx]), 2, seed=seed)
        sizes = np.bincount(km.labels, minlength=2)
        small = int(np.argmin(sizes))
        if sizes[small] / len(idx) < size_threshold:
            removed.extend(idx[km.labels == small].tolist())
    return np.sort(np.array(removed, dtype=int))


def retrain_without(data: Dataset, removed, hidden=(), cfg: TrainConfig = TrainConfig(),
                    name: str = "") -> DefenseOutcome:
    """Fit on the complement of ``removed`` and wrap the result as an outcome."""
    kept = np.setdiff1d(np.arange(len(data)), np.asarray(removed, dtype=int))
    if len(kept) == 0:
        raise ValueError("defense removed every training point")
    model = train(data.subset(kept), hidden, cfg)
    return _outcome(data, model, kept, 1, True, name)


def evaluate_defense(clean, defended, poisoned, test: Dataset, F, removed_indices, poison_indices,
                     n_train: int, defense: str = "") -> DefenseOutcome:
    """Fill in the found/removed/damage bookkeeping for a defense run.

    Damages are measured against the clean model: ``target_before`` for the
    undefended poisoned model, ``target_after`` and ``collateral_after`` for
    the defended one.
    """
    removed = frozenset(int(i) for i in removed_indices)
    poisons = set(int(i) for i in poison_indices)
    if any(i < 0 or i >= n_train for i in removed | poisons):
        raise ValueError("indices must lie in [0, n_train)")
    model = defended if isinstance(defended, ModelParams) else getattr(defended, "params_", None)
    return DefenseOutcome(
        final_model=model,
        removed_indices=removed,
        n_train=n_train,
        n_poison=len(poisons),
        n_found=len(poisons & removed),
        defense=defense,
        target_before=target_damage(clean, poisoned, test, F),
        target_after=target_damage(clean, defended, test, F),
        collateral_after=collateral_damage(clean, defended, test, F),
    )


def with_damages(outcome: DefenseOutcome, clean, poisoned, test: Dataset, F) -> DefenseOutcome:
    return replace(outcome,
                   target_before=target_damage(clean, poisoned, test, F),
                   target_after=target_damage(clean, outcome.final_model, test, F),
                   collateral_after=collateral_damage(clean, outcome.final_model, test, F))


# ---------------------------------------------------------------------------
# scikit-learn facades

class _FilteringClassifier(ClassifierMixin, BaseEstimator):
    _method = None

    def __init__(self, estimator=None, n_remove=0, max_iter=5):
        self.estimator = estimator
        self.n_remove = n_remove
        self.max_iter = max_iter

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        base = clone(self.estimator) if self.estimator is not None else SoftmaxNetwork()
        K = base.n_classes if base.n_classes is not None else int(np.max(y)) + 1
        data = Dataset(X, y, K, bounds=None)
        out = type(self)._method(data, tuple(base.hidden_layer_sizes), base.train_config,
                                 self.n_remove, self.max_iter)
        self.outcome_ = out
        self.removed_ = np.array(sorted(out.removed_indices), dtype=int)
        self.n_iter_ = out.n_iter
        self.estimator_ = SoftmaxNetwork.from_params(out.final_model)
        self.classes_ = np.arange(K)
        return self

    def predict(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict(X)

    def predict_proba(self, X):
        check_is_fitted(self, "estimator_")
        return self.estimator_.predict_proba(X)


class TrimClassifier(_FilteringClassifier):
    """TRIM wrapped around a :class:`SoftmaxNetwork` template."""
    _method = staticmethod(trim)


class SeverClassifier(_FilteringClassifier):
    """SEVER wrapped around a :class:`SoftmaxNetwork` template."""
    _method = staticmethod(sever)
