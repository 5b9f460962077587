"""Subpopulation discovery: annotation filters and representation clustering.

``ClusterMatch`` maps points through a surrogate model's layer, projects
with PCA and assigns each point to its nearest k-means center; every center
defines one filter function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset
from .models import ModelParams, TrainConfig, predict_proba, representation

STRATEGIES = ("lowest_confidence", "smallest", "highest_surrogate_damage")


# ---------------------------------------------------------------------------
# PCA

@dataclass(frozen=True)
class PCAResult:
    components: np.ndarray  # (r, d) orthonormal rows
    mean: np.ndarray
    explained_variance: np.ndarray


def pca_fit(X, r: int) -> PCAResult:
    """Top-``r`` principal directions of the centered data.

    Rows of ``components`` are right singular vectors, signed so that the
    largest-magnitude entry is positive. When the data has rank below ``r``
    the trailing components carry zero variance.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 points")
    if not 0 <= r <= min(n, d):
        raise ValueError(f"r={r} must lie in [0, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = Vt[:r]
    signs = np.sign(comps[np.arange(r), np.argmax(np.abs(comps), axis=1)]) if r else np.ones(0)
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PCAResult(comps, mean, s[:r] ** 2 / (n - 1))


def pca_transform(pca: PCAResult, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return (X - pca.mean) @ pca.components.T


# ---------------------------------------------------------------------------
# k-means

@dataclass(frozen=True)
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    history: tuple = field(default=())  # inertia after every assignment step of the winning run


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(X)), labels]


def _kmeans_pp(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(X, centers, max_iter, tol):
    labels, d2 = _assign(X, centers)
    history = [float(d2.sum())]
    for _ in range(max_iter):
        new = centers.copy()
        far = d2.copy()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:
                i = int(np.argmax(far))
                new[j] = X[i]
                far[i] = -1.0
        centers = new
        labels, d2 = _assign(X, centers)
        prev, cur = history[-1], float(d2.sum())
        history.append(cur)
        if prev <= 0 or (prev - cur) / prev < tol:
            break
    return centers, labels, history


def kmeans(X, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Nearest-center ties go to the lowest index. An empty cluster is
    re-seeded at the point farthest from its current center.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")
    best = None
    for seed_i in np.random.SeedSequence(seed).spawn(n_init):
        rng = np.random.default_rng(seed_i)
        centers, labels, hist = _lloyd(X, _kmeans_pp(X, k, rng), max_iter, tol)
        if best is None or hist[-1] < best.inertia:
            best = KMeansResult(centers, labels, hist[-1], tuple(hist))
    return best


# ---------------------------------------------------------------------------
# filters

class FilterFunction:
    """Predicate selecting a subpopulation; ``mask`` evaluates it on a dataset."""

    def mask(self, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, point) -> int:
        if isinstance(point, Dataset):
            return self.mask(point).astype(int)
        return int(self._point(point))

    def _point(self, point) -> bool:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class AnnotationFilter(FilterFunction):
    tag: str

    def mask(self, data: Dataset) -> np.ndarray:
        if data.annotations is None:
            raise ValueError("dataset carries no annotations")
        return data.annotations == self.tag

    def _point(self, point) -> bool:
        tag = point.annotation if hasattr(point, "annotation") else point
        return tag == self.tag

    @property
    def name(self) -> str:
        return f"tag={self.tag}"

    def to_dict(self) -> dict:
        return {"kind": "annotation_match", "tag": self.tag}


@dataclass(frozen=True, eq=False)
class ClusterModel:
    surrogate: ModelParams
    layer: int
    pca: PCAResult
    centers: np.ndarray
    inertia: float

    @property
    def n_clusters(self) -> int:
        return len(self.centers)

    def project(self, X) -> np.ndarray:
        return pca_transform(self.pca, representation(self.surrogate, X, self.layer))

    def assign(self, X) -> np.ndarray:
        return _assign(self.project(X), self.centers)[0]

    def to_dict(self, target: int | None = None) -> dict:
        return {
            "layer": self.layer,
            "basis": self.pca.components.tolist(),
            "mean": self.pca.mean.tolist(),
            "explained_variance": self.pca.explained_variance.tolist(),
            "centers": self.centers.tolist(),
            "inertia": self.inertia,
            "target": target,
            "surrogate": self.surrogate.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ClusterModel":
        r = len(obj["basis"])
        d = len(obj["mean"])
        pca = PCAResult(np.asarray(obj["basis"], dtype=float).reshape(r, d),
                        np.asarray(obj["mean"], dtype=float),
                        np.asarray(obj["explained_variance"], dtype=float))
        centers = np.asarray(obj["centers"], dtype=float).reshape(-1, r)
        return cls(ModelParams.from_dict(obj["surrogate"]), int(obj["layer"]), pca, centers,
                   float(obj["inertia"]))

    def to_json(self, target: int | None = None) -> str:
        return json.dumps(self.to_dict(target))


@dataclass(frozen=True, eq=False)
class ClusterFilter(FilterFunction):
    model: ClusterModel
    target: int

    def mask(self, data: Dataset) -> np.ndarray:
        return self.model.assign(data.X) == self.target

    def _point(self, point) -> bool:
        x = point.features if hasattr(point, "features") else point
        return bool(self.model.assign(np.atleast_2d(x))[0] == self.target)

    @property
    def name(self) -> str:
        return f"cluster={self.target}"

    def to_dict(self) -> dict:
        return {"kind": "cluster_match", **self.model.to_dict(self.target)}


def filter_from_dict(obj: dict) -> FilterFunction:
    if obj["kind"] == "annotation_match":
        return AnnotationFilter(obj["tag"])
    if obj["kind"] == "cluster_match":
        return ClusterFilter(ClusterModel.from_dict(obj), int(obj["target"]))
    raise ValueError(f"unknown filter kind {obj['kind']!r}")


def feature_match(aux: Dataset, target_tag) -> AnnotationFilter:
    """Exact-match filter on an annotation tag that occurs in ``aux``."""
    if aux.annotations is None:
        raise ValueError("aux dataset carries no annotations")
    tag = str(target_tag)
    if not np.any(aux.annotations == tag):
        raise ValueError(f"tag {tag!r} does not occur in the auxiliary data")
    return AnnotationFilter(tag)


def annotation_filters(aux: Dataset) -> list:
    """One filter per distinct tag in ``aux``, in sorted tag order."""
    if aux.annotations is None:
        raise ValueError("aux dataset carries no annotations")
    return [AnnotationFilter(t) for t in sorted(set(aux.annotations.tolist()) - {None})]


def cluster_match(aux: Dataset, surrogate: ModelParams, layer: int = 0, r: int = 10,
                  k_cluster: int = 100, seed: int = 0, n_init: int = 10):
    """Cluster the surrogate's layer-``layer`` representation of ``aux``.

    ``r`` is clipped to ``min(n, representation width)``. Returns
    ``(filters, cluster_model)`` with one :class:`ClusterFilter` per center.
    """
    Z = representation(surrogate, aux.X, layer)
    r_eff = min(r, Z.shape[0], Z.shape[1])
    pca = pca_fit(Z, r_eff)
    km = kmeans(pca_transform(pca, Z), k_cluster, seed=seed, n_init=n_init)
    model = ClusterModel(surrogate, layer, pca, km.centers, km.inertia)
    return [ClusterFilter(model, j) for j in range(k_cluster)], model


class ClusterMatch(TransformerMixin, BaseEstimator):
    """Estimator form of :func:`cluster_match`.

    ``transform`` returns the PCA projection of the surrogate representation
    and ``predict`` the nearest-center index.
    """

    def __init__(self, surrogate=None, layer=0, n_components=10, n_clusters=100, random_state=0, n_init=10):
        self.surrogate = surrogate
        self.layer = layer
        self.n_components = n_components
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.n_init = n_init

    def fit(self, X, y=None):
        X = check_array(X)
        surrogate = self.surrogate
        if surrogate is None:
            if self.layer != 0:
                raise ValueError("a surrogate model is required for layer > 0")
            surrogate = ModelParams((X.shape[1], 1), np.zeros(X.shape[1] + 1))
        surrogate = getattr(surrogate, "params_", surrogate)
        aux = Dataset(X, np.zeros(len(X), dtype=int), surrogate.n_classes)
        self.filters_, self.cluster_model_ = cluster_match(
            aux, surrogate, self.layer, self.n_components, self.n_clusters, self.random_state, self.n_init)
        self.labels_ = self.cluster_model_.assign(X)
        self.inertia_ = self.cluster_model_.inertia
        return self

    def transform(self, X):
        check_is_fitted(self, "cluster_model_")
        return self.cluster_model_.project(check_array(X))

    def predict(self, X):
        check_is_fitted(self, "cluster_model_")
        return self.cluster_model_.assign(check_array(X))


# ---------------------------------------------------------------------------
# picking a target

def rank_filters(filters: Sequence[FilterFunction], aux: Dataset, surrogate: ModelParams | None = None,
                 strategy: str = "highest_surrogate_damage", alpha: float = 1.0,
                 hidden: Sequence[int] = (), config: TrainConfig | None = None, seed: int = 0):
    """Order filter indices from most to least attractive target.

    Filters selecting no aux point are left out. Returns ``(order, scores)``
    where ``scores[i]`` is the per-filter statistic (NaN for skipped ones).
    Ties keep the lower index first.
    """
    if not filters:
        raise ValueError("no filters to rank")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    masks = [f.mask(aux) for f in filters]
    scores = np.full(len(filters), np.nan)
    if strategy == "smallest":
        for i, m in enumerate(masks):
            if m.any():
                scores[i] = m.sum()
        key = scores
    elif strategy == "lowest_confidence":
        if surrogate is None:
            raise ValueError("lowest_confidence needs a surrogate model")
        p_true = predict_proba(surrogate, aux.X)[np.arange(len(aux)), aux.y]
        for i, m in enumerate(masks):
            if m.any():
                scores[i] = p_true[m].mean()
        key = scores
    else:
        if surrogate is None:
            raise ValueError("highest_surrogate_damage needs a surrogate model")
        from .attacks import AttackConfig, label_flip
        from .metrics import target_damage
        from .models import train

        config = config or TrainConfig()
        for i, (f, m) in enumerate(zip(filters, masks)):
            if not m.any():
                continue
            poison = label_flip(aux, f, AttackConfig(poison_rate=alpha), surrogate, seed=seed)
            if len(poison) == 0:
                scores[i] = 0.0
                continue
            poisoned = train(aux.concat(poison.to_dataset(aux)), hidden, config)
            scores[i] = target_damage(surrogate, poisoned, aux.subset(m), None)
        key = -scores
    valid = np.flatnonzero(~np.isnan(scores))
    order = valid[np.argsort(key[valid], kind="stable")]
    return order, scores


def pick_cluster(filters, aux: Dataset, surrogate: ModelParams | None = None,
                 strategy: str = "highest_surrogate_damage", **kw) -> int:
    order, _ = rank_filters(filters, aux, surrogate, strategy, **kw)
    if len(order) == 0:
        raise ValueError("every filter selects an empty subpopulation")
    return int(order[0])
