"""Softmax classifiers trained from scratch with minibatch SGD or Adam.

The numerical core works on :class:`ModelParams`, an immutable flat parameter
vector plus layer widths ``(d, h_1, ..., h_L, K)``. No hidden layers gives a
multinomial logistic regression; otherwise hidden layers use ReLU. The
:class:`SoftmaxNetwork` estimator wraps the core for use with scikit-learn
tooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset


class TrainingDivergedError(FloatingPointError):
    """Loss or parameters became non-finite during training."""


@dataclass(frozen=True)
class ModelParams:
    widths: tuple
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (n_params(widths),):
            raise ValueError(f"expected {n_params(widths)} parameters for widths {widths}, got {theta.shape}")
        theta.setflags(write=False)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "theta", theta)

    @property
    def n_features(self) -> int:
        return self.widths[0]

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def is_linear(self) -> bool:
        return len(self.widths) == 2

    @property
    def n_layers(self) -> int:
        """Number of affine layers; valid representation indices are 0..n_layers."""
        return len(self.widths) - 1

    def layers(self) -> list:
        """Views ``[(W, b), ...]`` with ``W`` of shape (out, in)."""
        out, pos = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            W = self.theta[pos:pos + a * b].reshape(b, a)
            pos += a * b
            out.append((W, self.theta[pos:pos + b]))
            pos += b
        return out

    def with_theta(self, theta) -> "ModelParams":
        return ModelParams(self.widths, theta)

    def architecture(self) -> dict:
        if self.is_linear:
            return {"kind": "linear", "n_features": self.n_features, "n_classes": self.n_classes}
        return {"kind": "mlp", "widths": list(self.widths), "activation": "relu"}

    def to_dict(self) -> dict:
        return {"architecture": self.architecture(), "widths": list(self.widths),
                "theta": [float(t) for t in self.theta]}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelParams":
        return cls(tuple(obj["widths"]), np.asarray(obj["theta"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_dict(json.loads(text))


def n_params(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def make_widths(n_features: int, n_classes: int, hidden: Sequence[int] = ()) -> tuple:
    return (int(n_features), *[int(h) for h in hidden], int(n_classes))


def init_params(widths: Sequence[int], seed: int = 0) -> ModelParams:
    """Zeros for a linear model; hidden-layer nets draw weights from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    widths = tuple(widths)
    if len(widths) == 2:
        return ModelParams(widths, np.zeros(n_params(widths)))
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in zip(widths[:-1], widths[1:]):
        lim = 1.0 / np.sqrt(a)
        chunks.append(rng.uniform(-lim, lim, size=a * b))
        chunks.append(np.zeros(b))
    return ModelParams(widths, np.concatenate(chunks))


# ---------------------------------------------------------------------------
# forward / backward

def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


def _check_labels(params: ModelParams, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= params.n_classes or np.any(y != np.round(y))):
        raise ValueError(f"labels must be integers in [0, {params.n_classes})")
    return y.astype(int)


def _forward(params: ModelParams, X: np.ndarray):
    """Return (activations, pre-activations); activations[0] is X, last pre-activation is the logits."""
    acts, pres = [X], []
    layers = params.layers()
    for i, (W, b) in enumerate(layers):
        z = acts[-1] @ W.T + b
        pres.append(z)
        acts.append(z if i == len(layers) - 1 else np.maximum(z, 0.0))
    return acts, pres


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(params: ModelParams, X) -> np.ndarray:
    return _forward(params, _as_batch(X))[1][-1]


def predict_proba(params: ModelParams, X) -> np.ndarray:
    return np.exp(_log_softmax(logits(params, X)))


def predict(params: ModelParams, X) -> np.ndarray:
    """Arg-max class; ``np.argmax`` resolves ties toward the lowest index."""
    return np.argmax(logits(params, X), axis=1)


def accuracy(params: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(params, data.X) == data.y))


def per_example_loss(params: ModelParams, X, y) -> np.ndarray:
    """Cross-entropy ``-log f(x)_y`` for each row, without regularization."""
    X = _as_batch(X)
    y = _check_labels(params, y, X.shape[0])
    lp = _log_softmax(logits(params, X))
    return -lp[np.arange(len(y)), y]


def loss(params: ModelParams, X, y, l2: float = 0.0) -> float:
    X = _as_batch(X)
    if X.shape[0] == 0:
        raise ValueError("loss of an empty batch is undefined")
    return float(per_example_loss(params, X, y).mean() + 0.5 * l2 * params.theta @ params.theta)


def _backward(params: ModelParams, X: np.ndarray, y: np.ndarray, per_example: bool = False):
    """Backprop of the per-example cross-entropy.

    Returns (loss vector, parameter gradient, input gradients). The parameter
    gradient is the batch mean, or an (n, P) matrix when ``per_example``.
    """
    acts, pres = _forward(params, X)
    lp = _log_softmax(pres[-1])
    n = X.shape[0]
    losses = -lp[np.arange(n), y]
    delta = np.exp(lp)
    delta[np.arange(n), y] -= 1.0
    layers = params.layers()
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = acts[i]
        if per_example:
            gW = (delta[:, :, None] * a[:, None, :]).reshape(n, -1)
            grads[i] = np.hstack([gW, delta])
        else:
            grads[i] = np.concatenate([(delta.T @ a).ravel() / n, delta.sum(axis=0) / n])
        delta = delta @ W
        if i > 0:
            delta = delta * (pres[i - 1] > 0)
    g = np.hstack(grads) if per_example else np.concatenate(grads)
    return losses, g, delta


def grad_params(params: ModelParams, X, y, l2: float = 0.0) -> np.ndarray:
    """Gradient of :func:`loss` with respect to the flat parameter vector."""
    X = _as_batch(X)
    if X.shape[0] == 0:
        raise ValueError("gradient of an empty batch is undefined")
    y = _check_labels(params, y, X.shape[0])
    return _backward(params, X, y)[1] + l2 * params.theta


def per_example_grads(params: ModelParams, X, y) -> np.ndarray:
    """(n, P) matrix of unregularized per-example parameter gradients."""
    X = _as_batch(X)
    y = _check_labels(params, y, X.shape[0])
    return _backward(params, X, y, per_example=True)[1]


def grad_inputs(params: ModelParams, X, y) -> np.ndarray:
    """(n, d) gradients of each point's own loss with respect to its features."""
    X = _as_batch(X)
    if X.shape[0] == 0:
        raise ValueError("gradient of an empty batch is undefined")
    y = _check_labels(params, y, X.shape[0])
    return _backward(params, X, y)[2]


def hvp(params: ModelParams, X, y, v, l2: float = 0.0) -> np.ndarray:
    """Hessian-vector product of :func:`loss` (linear models only)."""
    if not params.is_linear:
        raise NotImplementedError("Hessian-vector products are implemented for linear models only")
    X = _as_batch(X)
    _check_labels(params, y, X.shape[0])
    K, d = params.n_classes, params.n_features
    v = np.asarray(v, dtype=float)
    V, c = v[:K * d].reshape(K, d), v[K * d:]
    p = predict_proba(params, X)
    dz = X @ V.T + c
    # (diag(p) - p p^T) dz, row-wise
    r = p * dz - p * (p * dz).sum(axis=1, keepdims=True)
    n = X.shape[0]
    return np.concatenate([(r.T @ X).ravel() / n, r.sum(axis=0) / n]) + l2 * v


def param_dot_input_grad(params: ModelParams, X, y, g, eps: float | None = None) -> np.ndarray:
    """Rows of ``grad_x [g . grad_theta loss(x_i, y_i)]`` for each point.

    Closed form for linear models. For hidden-layer networks the mixed
    derivative is taken as a central difference of :func:`grad_inputs` along
    ``g`` in parameter space.
    """
    X = _as_batch(X)
    y = _check_labels(params, y, X.shape[0])
    g = np.asarray(g, dtype=float)
    if params.is_linear:
        K, d = params.n_classes, params.n_features
        W, _ = params.layers()[0]
        G, c = g[:K * d].reshape(K, d), g[K * d:]
        p = predict_proba(params, X)
        s = p.copy()
        s[np.arange(len(y)), y] -= 1.0
        u = X @ G.T + c
        Ju = p * u - p * (p * u).sum(axis=1, keepdims=True)
        return s @ G + Ju @ W
    gn = np.linalg.norm(g)
    if gn == 0:
        return np.zeros_like(X)
    if eps is None:
        eps = 1e-5 * max(1.0, np.linalg.norm(params.theta)) / gn
    plus = grad_inputs(params.with_theta(params.theta + eps * g), X, y)
    minus = grad_inputs(params.with_theta(params.theta - eps * g), X, y)
    return (plus - minus) / (2 * eps)


def representation(params: ModelParams, X, layer: int) -> np.ndarray:
    """Activations after affine layer ``layer``.

    Layer 0 is the raw input, hidden layers return post-ReLU activations and
    the last index (``params.n_layers``) returns the logits.
    """
    if not 0 <= layer <= params.n_layers:
        raise ValueError(f"layer {layer} out of range [0, {params.n_layers}]")
    X = _as_batch(X)
    acts, _ = _forward(params, X)
    return acts[layer]


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    l2_reg: float = 0.0
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


def train(data, hidden: Sequence[int] = (), config: TrainConfig = TrainConfig(),
          init: ModelParams | None = None, n_classes: int | None = None,
          history: list | None = None) -> ModelParams:
    """Fit by minibatch SGD/Adam on mean cross-entropy + ``l2/2 * |theta|^2``.

    ``data`` is a :class:`Dataset` or an ``(X, y)`` pair. Shuffling and
    initialization are seeded by ``config.seed``; the final-epoch parameters
    are returned. If ``history`` is a list, the full-batch objective after
    each epoch is appended to it.
    """
    if isinstance(data, Dataset):
        X, y, K = data.X, data.y, data.n_classes
    else:
        X, y = data
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        K = n_classes if n_classes is not None else int(y.max()) + 1
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init if init is not None else init_params(make_widths(X.shape[1], K, hidden), config.seed)
    if params.n_features != X.shape[1] or params.n_classes != K:
        raise ValueError("initial parameters do not match the data shape")
    y = _check_labels(params, y, len(X))

    cfg = config
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(params.theta, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(X)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                cur = ModelParams(params.widths, theta)
                losses, g, _ = _backward(cur, X[idx], y[idx])
                g = g + cfg.l2_reg * theta
                if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(g))):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} may be too large")
                step += 1
                if cfg.optimizer == "sgd":
                    theta = theta - cfg.learning_rate * g
                else:
                    m = b1 * m + (1 - b1) * g
                    v = b2 * v + (1 - b2) * g * g
                    mhat = m / (1 - b1 ** step)
                    vhat = v / (1 - b2 ** step)
                    theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + adam_eps)
                if not np.all(np.isfinite(theta)):
                    raise TrainingDivergedError(
                        f"non-finite parameters at epoch {epoch}; learning rate {cfg.learning_rate} may be too large")
            if history is not None:
                history.append(loss(ModelParams(params.widths, theta), X, y, cfg.l2_reg))
    return ModelParams(params.widths, theta)


# ---------------------------------------------------------------------------
# scikit-learn facade

class SoftmaxNetwork(ClassifierMixin, BaseEstimator):
    """Softmax classifier (linear when ``hidden_layer_sizes`` is empty).

    Labels must already be integer class indices; ``n_classes`` fixes K when
    a training subset may miss some classes.
    """

    def __init__(self, hidden_layer_sizes=(), learning_rate=0.1, epochs=100, batch_size=32,
                 l2_reg=0.0, optimizer="sgd", random_state=0, n_classes=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.l2_reg = l2_reg
        self.optimizer = optimizer
        self.random_state = random_state
        self.n_classes = n_classes

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, self.l2_reg,
                           self.random_state, self.optimizer)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        K = self.n_classes if self.n_classes is not None else int(np.max(y)) + 1
        self.params_ = train((X, y), tuple(self.hidden_layer_sizes), self.train_config, n_classes=K)
        self.classes_ = np.arange(K)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_params(cls, params: ModelParams, **kw) -> "SoftmaxNetwork":
        est = cls(hidden_layer_sizes=tuple(params.widths[1:-1]), n_classes=params.n_classes, **kw)
        est.params_ = params
        est.classes_ = np.arange(params.n_classes)
        est.n_features_in_ = params.n_features
        return est

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return logits(self.params_, check_array(X))

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return predict_proba(self.params_, check_array(X))

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict(self.params_, check_array(X))

    def transform(self, X, layer: int = -1):
        """Layer representation; ``-1`` means the last hidden layer (logits for linear)."""
        check_is_fitted(self, "params_")
        if layer == -1:
            layer = max(self.params_.n_layers - 1, 1)
        return representation(self.params_, check_array(X), layer)
