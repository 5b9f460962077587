"""Poison generation: label flipping and two feature-space refinements.

Both refinements push poison features along the first-order change they
cause in the loss on a target set drawn from the auxiliary data:

* ``grad_opt`` treats the poisoned model as one gradient step away from the
  surrogate (identity curvature);
* ``influence_attack`` uses the inverse regularized Hessian of the surrogate's
  training objective, obtained by conjugate gradients on Hessian-vector
  products.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .models import ModelParams, grad_params, hvp, param_dot_input_grad, per_example_loss

GENERATORS = ("label_flip", "grad_opt", "influence")


class HessianError(ArithmeticError):
    """Hessian is not positive definite or CG failed to converge."""


@dataclass(frozen=True)
class AttackConfig:
    poison_rate: float = 1.0
    target_label: str | int = "max_loss"
    steps: int = 50
    step_size: float = 0.1
    clamp: bool = True

    def __post_init__(self):
        if not self.poison_rate > 0:
            raise ValueError("poison_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.target_label != "max_loss" and not isinstance(self.target_label, (int, np.integer)):
            raise ValueError("target_label must be 'max_loss' or a class index")


@dataclass(frozen=True, eq=False)
class PoisonSet:
    X: np.ndarray
    y: np.ndarray
    origin: str
    generator: str
    source_index: np.ndarray = field(default=None, repr=False)
    objective_history: tuple = ()
    subpop_ids: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.y)

    def replace_features(self, X, generator: str, history=()) -> "PoisonSet":
        return PoisonSet(np.array(X, dtype=float), self.y, self.origin, generator, self.source_index,
                         tuple(history), self.subpop_ids)

    def to_dataset(self, like: Dataset, uid_start: int | None = None) -> Dataset:
        """Poison points as a :class:`Dataset` compatible with ``like``."""
        start = int(like.uids.max()) + 1 if uid_start is None and len(like) else (uid_start or 0)
        X = self.X.reshape(len(self), like.feature_dim)
        subpops = self.subpop_ids
        if subpops is None and like.subpop_ids is not None:
            subpops = [-1] * len(self)
        return Dataset(X, self.y, like.n_classes,
                       annotations=None if like.annotations is None else [None] * len(self),
                       subpop_ids=subpops,
                       poison=np.ones(len(self), dtype=bool),
                       uids=np.arange(start, start + len(self)), bounds=like.bounds)

    def to_json(self, like: Dataset) -> str:
        obj = self.to_dataset(like).to_dict()
        obj["origin"] = self.origin
        obj["generator"] = self.generator
        return json.dumps(obj, indent=1)


def poison_count(rate: float, subpop_size: int) -> int:
    """``round(rate * subpop_size)`` with halves rounded up."""
    return int(math.floor(rate * subpop_size + 0.5))


def _clamp(X, bounds):
    return X if bounds is None else np.clip(X, bounds[:, 0], bounds[:, 1])


def majority_label(y, n_classes: int) -> int:
    return int(np.argmax(np.bincount(np.asarray(y, dtype=int), minlength=n_classes)))


def label_flip(aux: Dataset, F, cfg: AttackConfig, surrogate: ModelParams | None = None,
               seed: int = 0) -> PoisonSet:
    """Copy ``round(rate * m)`` filter members of ``aux`` with one wrong label.

    Members are drawn without replacement, or with replacement when the rate
    exceeds 1. With ``target_label='max_loss'`` the label is the non-majority
    class with the largest mean surrogate loss on the drawn points (K=2: the
    other class).
    """
    members = np.flatnonzero(F.mask(aux))
    if len(members) == 0:
        raise ValueError("filter selects no auxiliary point")
    K = aux.n_classes
    if K < 2:
        raise ValueError("label flipping needs at least two classes")
    count = poison_count(cfg.poison_rate, len(members))
    rng = np.random.default_rng(seed)
    idx = rng.choice(members, size=count, replace=cfg.poison_rate > 1)
    majority = majority_label(aux.y[members], K)
    if cfg.target_label == "max_loss":
        candidates = [t for t in range(K) if t != majority]
        if len(candidates) == 1 or surrogate is None:
            t = candidates[0]
        else:
            pts = aux.X[idx] if count else aux.X[members]
            mean_loss = [per_example_loss(surrogate, pts, np.full(len(pts), c)).mean() for c in candidates]
            t = candidates[int(np.argmax(mean_loss))]
    else:
        t = int(cfg.target_label)
        if not 0 <= t < K:
            raise ValueError(f"target label {t} out of range")
        if t == majority:
            raise ValueError("target label equals the subpopulation's majority label")
    name = getattr(F, "name", type(F).__name__)
    return PoisonSet(aux.X[idx].copy(), np.full(count, t, dtype=int), name, "label_flip", idx)


# ---------------------------------------------------------------------------
# optimization-based refinement

def _target_gradient(model: ModelParams, target):
    X_a, y_a = target
    X_a = np.asarray(X_a, dtype=float)
    if len(X_a) == 0:
        raise ValueError("target set is empty")
    return grad_params(model, X_a, y_a)


def attack_objective(surrogate: ModelParams, X_p, y_p, target) -> float:
    """First-order increase in target loss from one step on the poisons.

    Equals ``-g_a . sum_i grad_theta loss(x_i, y_i)`` with ``g_a`` the target
    loss gradient; positive values mean the poisons raise target loss.
    """
    g_a = _target_gradient(surrogate, target)
    X_p = np.asarray(X_p, dtype=float)
    if len(X_p) == 0:
        return 0.0
    return float(-len(X_p) * g_a @ grad_params(surrogate, X_p, y_p))


def grad_opt_direction(surrogate: ModelParams, X_p, y_p, target) -> np.ndarray:
    """Gradient of :func:`attack_objective` with respect to the poison features."""
    g_a = _target_gradient(surrogate, target)
    return -param_dot_input_grad(surrogate, X_p, y_p, g_a)


def grad_opt(init: PoisonSet, surrogate: ModelParams, target, cfg: AttackConfig,
             bounds: np.ndarray | None = None) -> PoisonSet:
    """Fixed-step ascent on :func:`attack_objective`; labels stay fixed.

    Features are clamped to ``bounds`` after every step when ``cfg.clamp``.
    The best iterate seen (including the start) is returned.
    """
    _target_gradient(surrogate, target)
    if cfg.steps == 0 or len(init) == 0:
        return init
    bounds = bounds if cfg.clamp else None
    X = np.array(init.X, dtype=float)
    best_X, best = X, attack_objective(surrogate, X, init.y, target)
    history = [best]
    for _ in range(cfg.steps):
        X = _clamp(X + cfg.step_size * grad_opt_direction(surrogate, X, init.y, target), bounds)
        obj = attack_objective(surrogate, X, init.y, target)
        history.append(obj)
        if obj > best:
            best, best_X = obj, X
    return init.replace_features(best_X, "grad_opt", history)


def conjugate_gradient(matvec, b, max_iter: int, tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` given as a mat-vec."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x
    for _ in range(max_iter):
        Ap = matvec(p)
        curv = p @ Ap
        if curv <= 0:
            raise HessianError("Hessian is not positive definite")
        a = rs / curv
        x = x + a * p
        r = r - a * Ap
        rs_new = r @ r
        if np.sqrt(rs_new) <= tol * bnorm:
            return x
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise HessianError(f"conjugate gradient did not converge in {max_iter} iterations")


def inverse_hvp(model: ModelParams, hessian_data, l2: float, v) -> np.ndarray:
    """``H^{-1} v`` for the regularized mean cross-entropy on ``hessian_data``."""
    if not model.is_linear:
        raise NotImplementedError("influence computations are restricted to linear models")
    if not l2 > 0:
        raise HessianError("l2 regularization must be positive for a positive definite Hessian")
    X_h, y_h = hessian_data
    return conjugate_gradient(lambda u: hvp(model, X_h, y_h, u, l2), np.asarray(v, dtype=float),
                              max_iter=10 * len(model.theta))


def influence_direction(model: ModelParams, X_p, y_p, target, hessian_data=None, l2: float = 0.0,
                        identity_hessian: bool = False) -> np.ndarray:
    """``-g_a^T H^{-1} grad_x grad_theta loss(x, y)`` for each poison point."""
    g_a = _target_gradient(model, target)
    v = g_a if identity_hessian else inverse_hvp(model, hessian_data, l2, g_a)
    return -param_dot_input_grad(model, X_p, y_p, v)


def influence_on_target_loss(model: ModelParams, hessian_data, l2: float, x, y, target) -> float:
    """Predicted d(target loss)/d(epsilon) when ``(x, y)`` is up-weighted by epsilon."""
    g_a = _target_gradient(model, target)
    g_z = grad_params(model, np.atleast_2d(x), np.atleast_1d(y))
    return float(-g_a @ inverse_hvp(model, hessian_data, l2, g_z))


def influence_attack(init: PoisonSet, model: ModelParams, target, cfg: AttackConfig,
                     hessian_data=None, l2: float = 0.0, bounds: np.ndarray | None = None,
                     identity_hessian: bool = False) -> PoisonSet:
    """``cfg.steps`` clamped ascent steps along :func:`influence_direction`.

    ``hessian_data`` is the ``(X, y)`` the model was trained on (the auxiliary
    data for a surrogate) and ``l2`` its regularization strength. The last
    iterate is returned.
    """
    if not model.is_linear:
        raise NotImplementedError("influence_attack supports linear models only")
    g_a = _target_gradient(model, target)
    if cfg.steps == 0 or len(init) == 0:
        return init
    v = g_a if identity_hessian else inverse_hvp(model, hessian_data, l2, g_a)
    bounds = bounds if cfg.clamp else None
    X = np.array(init.X, dtype=float)
    history = [attack_objective(model, X, init.y, target)]
    for _ in range(cfg.steps):
        X = _clamp(X - cfg.step_size * param_dot_input_grad(model, X, init.y, v), bounds)
        history.append(attack_objective(model, X, init.y, target))
    return init.replace_features(X, "influence", history)
