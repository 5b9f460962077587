"""Noisy k-subpopulation mixtures and the label-flip attack on mixture learners.

Samples carry their subpopulation index (the support function) in
``Dataset.subpop_ids``; features are realized as disjoint unit intervals
``[i, i + 1)`` so the supports never overlap.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attacks import PoisonSet
from .data import Dataset

TIE_BREAKS = ("zero", "one", "poisoned_label")


@dataclass(frozen=True)
class MixtureSpec:
    weights: tuple
    label_probs: tuple

    def __post_init__(self):
        w = tuple(float(a) for a in self.weights)
        p = tuple(float(a) for a in self.label_probs)
        if not w:
            raise ValueError("need at least one subpopulation")
        if len(w) != len(p):
            raise ValueError("weights and label_probs must have equal length")
        if min(w) <= 0:
            raise ValueError("mixture weights must be positive")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {math.fsum(w)!r}, not 1")
        if min(p) < 0 or max(p) > 1:
            raise ValueError("label probabilities must lie in [0, 1]")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "label_probs", p)

    @property
    def k(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, k: int, label_probs: Sequence[float]) -> "MixtureSpec":
        return cls((1.0 / k,) * k, tuple(label_probs))


def sample_mixture(spec: MixtureSpec, n: int, seed: int | np.random.Generator = 0) -> Dataset:
    """Draw ``n`` points: subpopulation ~ Categorical(weights), label ~ Bernoulli(p_i)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    ids = rng.choice(spec.k, size=n, p=np.asarray(spec.weights) / math.fsum(spec.weights))
    y = (rng.random(n) < np.asarray(spec.label_probs)[ids]).astype(int)
    X = (ids + rng.random(n))[:, None]
    return Dataset(X, y, 2, subpop_ids=ids)


def support_of(x) -> np.ndarray:
    """Subpopulation index of a feature value under the unit-interval realization."""
    return np.floor(np.asarray(x, dtype=float)).astype(int).ravel()


@dataclass(frozen=True)
class MixtureLearner:
    labels: np.ndarray
    tie_break: str = "zero"

    def predict(self, data) -> np.ndarray:
        ids = data.subpop_ids if isinstance(data, Dataset) else np.asarray(data, dtype=int)
        return self.labels[ids]


def _subpop_label(y: np.ndarray, poison: np.ndarray, tie_break: str) -> int:
    ones = int(y.sum())
    zeros = len(y) - ones
    if ones != zeros:
        return int(ones > zeros)
    if tie_break == "zero":
        return 0
    if tie_break == "one":
        return 1
    py = y[poison]
    p_ones = int(py.sum())
    return int(p_ones > len(py) - p_ones)


def fit_mixture_learner(data: Dataset, tie_break: str = "zero", k: int | None = None) -> MixtureLearner:
    """Majority label per subpopulation (0-1 loss minimizer).

    Ties resolve to 0, to 1, or (``poisoned_label``) to the majority label
    of the poison-provenance points in that subpopulation, falling back to 0.
    Subpopulations without samples get label 0.
    """
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"unknown tie_break {tie_break!r}")
    if data.subpop_ids is None:
        raise ValueError("dataset carries no subpopulation ids")
    if len(data) and (data.y.min() < 0 or data.y.max() > 1):
        raise ValueError("mixture learners need binary labels")
    ids = data.subpop_ids
    if k is None:
        k = int(ids.max()) + 1 if len(data) else 0
    labels = np.zeros(k, dtype=int)
    for i in range(k):
        m = ids == i
        if m.any():
            labels[i] = _subpop_label(data.y[m], data.poison[m], tie_break)
    return MixtureLearner(labels, tie_break)


def smallest_subpop(data: Dataset) -> int:
    """Index of the least-populated subpopulation present in ``data`` (lowest id on ties)."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    present, counts = np.unique(data.subpop_ids, return_counts=True)
    return int(present[np.argmin(counts)])


def impossibility_attack(data: Dataset) -> PoisonSet:
    """Flipped-label copies of the smallest subpopulation, plus one extra.

    Every point of the smallest subpopulation ``D_K`` is copied with its label
    flipped, and one more copy is added carrying ``1 - majority(D_K)``
    (label 1 when ``D_K`` is tied). The poisoned subpopulation then holds a
    strict majority of the flipped label, so ``|D_K| + 1`` points change the
    learner's decision on ``K`` unless ``D_K`` itself was tied and the learner
    already broke that tie toward the extra label.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if data.subpop_ids is None:
        raise ValueError("dataset carries no subpopulation ids")
    K = smallest_subpop(data)
    idx = np.flatnonzero(data.subpop_ids == K)
    y = data.y[idx]
    ones = int(y.sum())
    t = 0 if ones > len(y) - ones else 1
    X = np.vstack([data.X[idx], data.X[idx[:1]]])
    labels = np.concatenate([1 - y, [t]])
    src = np.concatenate([idx, idx[:1]])
    return PoisonSet(X, labels, f"subpop={K}", "impossibility", src,
                     subpop_ids=np.full(len(labels), K, dtype=int))


@dataclass(frozen=True)
class ChernoffBound:
    size_bound: float
    success_prob_lower: float


def chernoff_attack_bound(alpha: float, n: int, k: int | None = None) -> ChernoffBound:
    """Attack size ``2 alpha n`` succeeding with probability at least ``1 - exp(-alpha n / 2)``.

    ``alpha`` is the smallest mixture weight, so ``alpha <= 1/k``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    upper = 1.0 if k is None else 1.0 / k
    if not 0 < alpha <= upper + 1e-15:
        raise ValueError(f"alpha must lie in (0, {upper}]")
    return ChernoffBound(2.0 * alpha * n, 1.0 - math.exp(-alpha * n / 2.0))


def pigeonhole_attack_size(n: int, k: int) -> int:
    """Largest possible size of the smallest of ``k`` subpopulations among ``n`` points."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be positive")
    return n // k


@dataclass
class TheoremReport:
    k: int
    n: int
    trials: int
    flip_rate: float
    flip_rate_by_tie_break: dict
    mean_attack_size: float
    max_attack_size: int
    attack_size_bound: int
    chernoff_empirical_rate: float
    min_weight_empirical_rate: float
    chernoff_size_bound: float
    chernoff_prob_lower: float
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def verify_theorem(spec: MixtureSpec, n: int, trials: int, seed: int = 0,
                   tie_breaks: Sequence[str] = TIE_BREAKS) -> TheoremReport:
    """Monte Carlo check of the attack against every tie-break rule.

    Per trial: sample ``D``, fit, attack the smallest subpopulation, refit on
    ``D + D_p`` and record whether that subpopulation's label flipped.
    ``chernoff_empirical_rate`` is the share of trials with
    ``|D_K| < 2 alpha_min n``; ``min_weight_empirical_rate`` is the same for
    the subpopulation of smallest weight.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    alpha = min(spec.weights)
    j = int(np.argmin(spec.weights))
    bound = chernoff_attack_bound(alpha, n)
    flips = {tb: 0 for tb in tie_breaks}
    sizes, below, below_j = [], 0, 0
    for child in np.random.SeedSequence(seed).spawn(trials):
        D = sample_mixture(spec, n, np.random.default_rng(child))
        attack = impossibility_attack(D)
        K = int(attack.subpop_ids[0])
        D_K = len(attack) - 1
        sizes.append(len(attack))
        below += D_K < bound.size_bound
        below_j += int(np.sum(D.subpop_ids == j)) < bound.size_bound
        poisoned = D.concat(attack.to_dataset(D))
        for tb in tie_breaks:
            before = fit_mixture_learner(D, tb, spec.k).labels[K]
            after = fit_mixture_learner(poisoned, tb, spec.k).labels[K]
            flips[tb] += int(before != after)
    by_tb = {tb: flips[tb] / trials for tb in tie_breaks}
    return TheoremReport(
        k=spec.k, n=n, trials=trials,
        flip_rate=min(by_tb.values()),
        flip_rate_by_tie_break=by_tb,
        mean_attack_size=float(np.mean(sizes)),
        max_attack_size=int(max(sizes)),
        attack_size_bound=math.ceil(n / spec.k) + 1,
        chernoff_empirical_rate=below / trials,
        min_weight_empirical_rate=below_j / trials,
        chernoff_size_bound=bound.size_bound,
        chernoff_prob_lower=bound.success_prob_lower,
        seed=seed,
    )
