"""Target and collateral damage on held-out data."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .models import ModelParams
from .models import predict as _predict_params


def _predict(model, X) -> np.ndarray:
    if isinstance(model, ModelParams):
        return _predict_params(model, X)
    return np.asarray(model.predict(X))


def _errors(model, data: Dataset) -> np.ndarray:
    return (_predict(model, data.X) != data.y).astype(float)


def _split_mask(test: Dataset, F) -> np.ndarray:
    return np.ones(len(test), dtype=bool) if F is None else np.asarray(F.mask(test), dtype=bool)


def damage_on(clean, poisoned, data: Dataset) -> float:
    """Mean of ``1[poisoned wrong] - 1[clean wrong]`` over ``data``."""
    if len(data) == 0:
        raise ValueError("no test points to evaluate damage on")
    return float(np.mean(_errors(poisoned, data) - _errors(clean, data)))


def target_damage(clean, poisoned, test: Dataset, F) -> float:
    """Error increase on test points with ``F(x) = 1`` (``F=None`` selects all)."""
    m = _split_mask(test, F)
    if not m.any():
        raise ValueError("the subpopulation has no test points")
    return damage_on(clean, poisoned, test.subset(m))


def collateral_damage(clean, poisoned, test: Dataset, F) -> float:
    """Error increase on test points with ``F(x) = 0``."""
    m = ~_split_mask(test, F)
    if not m.any():
        raise ValueError("the filter selects every test point; collateral damage is undefined")
    return damage_on(clean, poisoned, test.subset(m))


@dataclass(frozen=True)
class DamageReport:
    target_damage: float
    collateral_damage: float
    subpop_test_count: int
    clean_acc: float
    poisoned_acc: float
    subpop: str = ""
    alpha: float = float("nan")
    n_poison: int = 0
    subpop_aux_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def damage_report(clean, poisoned, test: Dataset, F, **meta) -> DamageReport:
    m = _split_mask(test, F)
    if not m.any():
        raise ValueError("the subpopulation has no test points")
    coll = damage_on(clean, poisoned, test.subset(~m)) if (~m).any() else 0.0
    return DamageReport(
        target_damage=damage_on(clean, poisoned, test.subset(m)),
        collateral_damage=coll,
        subpop_test_count=int(m.sum()),
        clean_acc=1.0 - float(_errors(clean, test).mean()),
        poisoned_acc=1.0 - float(_errors(poisoned, test).mean()),
        **meta,
    )


@dataclass(frozen=True)
class WorstKSummary:
    k: int
    target_damage: float
    collateral_damage: float
    subpop_size: float
    n_reports: int


def worst_k_summary(reports: Sequence[DamageReport], k: int) -> WorstKSummary:
    """Average the ``k`` reports with the largest target damage.

    Ties keep input order; ``k`` larger than the number of reports averages all.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not reports:
        raise ValueError("no reports to summarize")
    td = np.array([r.target_damage for r in reports])
    top = np.argsort(-td, kind="stable")[:k]
    chosen = [reports[i] for i in top]
    return WorstKSummary(
        k=k,
        target_damage=float(np.mean([r.target_damage for r in chosen])),
        collateral_damage=float(np.mean([r.collateral_damage for r in chosen])),
        subpop_size=float(np.mean([r.subpop_test_count for r in chosen])),
        n_reports=len(chosen),
    )
