"""Datasets, deterministic splits, CSV ingestion and synthetic generators.

A :class:`Dataset` stores points column-wise (feature matrix, label vector,
optional annotation tags and subpopulation ids) together with a per-point
identity and a poison flag, so that train/aux/test splits and appended
poison sets can be tracked through every later stage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

CLEAN = "clean"
POISON = "poison"


class SchemaError(ValueError):
    """Raised when tabular input does not match its declared schema."""


@dataclass(frozen=True)
class LabeledPoint:
    features: np.ndarray
    label: int
    annotation: str | None = None
    subpop_id: int | None = None
    provenance: str = CLEAN
    uid: int = -1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class Dataset:
    """Immutable labeled dataset.

    Parameters
    ----------
    X : array of shape (n, d)
    y : integer labels in ``[0, n_classes)``
    n_classes : number of classes K. Inferred as ``max(y) + 1`` when omitted.
    annotations : optional sequence of string tags, one per point.
    subpop_ids : optional integer subpopulation index per point (-1 = none).
    poison : optional boolean mask marking poison provenance.
    uids : optional integer identities; default ``arange(n)``.
    bounds : optional (d, 2) array of per-feature ``[lo, hi]``. Defaults to
        the observed min/max over clean points.
    """

    def __init__(self, X, y, n_classes=None, annotations=None, subpop_ids=None,
                 poison=None, uids=None, bounds=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {X.shape}")
        n, d = X.shape
        if d < 1:
            raise ValueError("feature_dim must be positive")
        y = np.asarray(y)
        if y.shape != (n,):
            raise ValueError(f"y must have shape ({n},), got {y.shape}")
        if n and not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(int)
        if n_classes is None:
            n_classes = int(y.max()) + 1 if n else 1
        if n_classes < 1:
            raise ValueError("n_classes must be positive")
        if n and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")

        if annotations is not None:
            annotations = np.array([None if a is None else str(a) for a in annotations], dtype=object)
            if annotations.shape != (n,):
                raise ValueError("annotations length must equal number of points")
        if subpop_ids is not None:
            subpop_ids = np.asarray(subpop_ids, dtype=int)
            if subpop_ids.shape != (n,):
                raise ValueError("subpop_ids length must equal number of points")
        poison = np.zeros(n, dtype=bool) if poison is None else np.asarray(poison, dtype=bool)
        if poison.shape != (n,):
            raise ValueError("poison mask length must equal number of points")
        uids = np.arange(n) if uids is None else np.asarray(uids, dtype=int)
        if uids.shape != (n,) or len(np.unique(uids)) != n:
            raise ValueError("uids must be unique, one per point")

        if bounds is None:
            clean = X[~poison]
            if len(clean):
                bounds = np.stack([clean.min(axis=0), clean.max(axis=0)], axis=1)
        if bounds is not None:
            bounds = np.asarray(bounds, dtype=float)
            if bounds.shape != (d, 2) or np.any(bounds[:, 0] > bounds[:, 1]):
                raise ValueError("bounds must be a (d, 2) array with lo <= hi")
            clean = X[~poison]
            tol = 1e-9 * (1.0 + np.abs(bounds).max())
            if np.any(clean < bounds[:, 0] - tol) or np.any(clean > bounds[:, 1] + tol):
                raise ValueError("clean points fall outside feature_bounds")

        self.X = _frozen(X)
        self.y = _frozen(y)
        self.n_classes = int(n_classes)
        self.annotations = None if annotations is None else _frozen(annotations)
        self.subpop_ids = None if subpop_ids is None else _frozen(subpop_ids)
        self.poison = _frozen(poison)
        self.uids = _frozen(uids)
        self.bounds = None if bounds is None else _frozen(bounds)

    # -- basic accessors -------------------------------------------------
    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def __getitem__(self, i: int) -> LabeledPoint:
        return LabeledPoint(
            features=self.X[i],
            label=int(self.y[i]),
            annotation=None if self.annotations is None else self.annotations[i],
            subpop_id=None if self.subpop_ids is None else int(self.subpop_ids[i]),
            provenance=POISON if self.poison[i] else CLEAN,
            uid=int(self.uids[i]),
        )

    def __iter__(self) -> Iterator[LabeledPoint]:
        for i in range(len(self)):
            yield self[i]

    def __repr__(self) -> str:
        return (f"Dataset(n={len(self)}, d={self.feature_dim}, K={self.n_classes}, "
                f"poison={int(self.poison.sum())})")

    def _replace(self, **kw) -> "Dataset":
        args = dict(X=self.X, y=self.y, n_classes=self.n_classes, annotations=self.annotations,
                    subpop_ids=self.subpop_ids, poison=self.poison, uids=self.uids,
                    bounds=self.bounds)
        args.update(kw)
        return Dataset(**args)

    def subset(self, idx) -> "Dataset":
        """Rows selected by an index array or boolean mask (bounds are kept)."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(int, copy=False)
        return Dataset(
            self.X[idx], self.y[idx], self.n_classes,
            annotations=None if self.annotations is None else self.annotations[idx],
            subpop_ids=None if self.subpop_ids is None else self.subpop_ids[idx],
            poison=self.poison[idx], uids=self.uids[idx], bounds=self.bounds,
        )

    def with_labels(self, y) -> "Dataset":
        return self._replace(y=np.asarray(y))

    def concat(self, other: "Dataset") -> "Dataset":
        """Append ``other``. Colliding identities in ``other`` are shifted past ours.

        Bounds widen to cover both operands' bounds.
        """
        if other.feature_dim != self.feature_dim or other.n_classes != self.n_classes:
            raise ValueError("cannot concatenate datasets with different d or K")
        other_uids = other.uids
        if np.intersect1d(self.uids, other_uids).size:
            other_uids = other_uids - other_uids.min() + self.uids.max() + 1

        def _cat(a, b, n_a, n_b, fill):
            if a is None and b is None:
                return None
            a = np.full(n_a, fill, dtype=object) if a is None else a
            b = np.full(n_b, fill, dtype=object) if b is None else b
            return np.concatenate([a, b])

        subpops = _cat(self.subpop_ids, other.subpop_ids, len(self), len(other), -1)
        bounds = self.bounds
        if bounds is not None and other.bounds is not None:
            bounds = np.column_stack([np.minimum(bounds[:, 0], other.bounds[:, 0]),
                                      np.maximum(bounds[:, 1], other.bounds[:, 1])])
        return Dataset(
            np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]), self.n_classes,
            annotations=_cat(self.annotations, other.annotations, len(self), len(other), None),
            subpop_ids=None if subpops is None else subpops.astype(int),
            poison=np.concatenate([self.poison, other.poison]),
            uids=np.concatenate([self.uids, other_uids]),
            bounds=bounds,
        )

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "feature_dim": self.feature_dim,
            "bounds": None if self.bounds is None else self.bounds.tolist(),
            "points": [
                {
                    "uid": int(p.uid),
                    "features": [float(v) for v in p.features],
                    "label": p.label,
                    "annotation": p.annotation,
                    "subpop_id": p.subpop_id,
                    "provenance": p.provenance,
                }
                for p in self
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Dataset":
        pts = obj["points"]
        d = int(obj["feature_dim"])
        X = np.array([p["features"] for p in pts], dtype=float).reshape(len(pts), d)
        annotations = [p.get("annotation") for p in pts]
        subpops = [p.get("subpop_id") for p in pts]
        return cls(
            X, [p["label"] for p in pts], obj["n_classes"],
            annotations=None if all(a is None for a in annotations) else annotations,
            subpop_ids=None if all(s is None for s in subpops) else [-1 if s is None else s for s in subpops],
            poison=[p.get("provenance", CLEAN) == POISON for p in pts],
            uids=[p["uid"] for p in pts],
            bounds=obj.get("bounds"),
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, text_or_path) -> "Dataset":
        p = Path(str(text_or_path))
        if not str(text_or_path).lstrip().startswith("{") and p.exists():
            text_or_path = p.read_text()
        return cls.from_dict(json.loads(text_or_path))


@dataclass(frozen=True)
class Split:
    train: Dataset
    aux: Dataset
    test: Dataset

    def __post_init__(self):
        parts = [set(self.train.uids.tolist()), set(self.aux.uids.tolist()), set(self.test.uids.tolist())]
        if parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2]:
            raise ValueError("split parts must be pairwise disjoint")


def split_dataset(data: Dataset, fractions: Sequence[float] = (0.5, 0.25, 0.25), seed: int = 0) -> Split:
    """Shuffle and partition into train/aux/test.

    Part sizes are ``floor(f * n)``; the remainder goes to train.
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three positive numbers summing to 1")
    n = len(data)
    sizes = [math.floor(f * n) for f in fractions]
    sizes[0] += n - sum(sizes)
    if min(sizes) < 1:
        raise ValueError(f"dataset of {n} points is too small for fractions {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(data.subset(perm[:a]), data.subset(perm[a:b]), data.subset(perm[b:]))


@dataclass(frozen=True)
class GaussianSubpop:
    mean: Sequence[float]
    std: Sequence[float] | float
    count: int
    label: int
    annotation: str | None = None


def synth_gaussian_subpops(spec: Sequence, seed: int = 0, n_classes: int | None = None) -> Dataset:
    """Draw axis-aligned Gaussian subpopulations.

    ``spec`` holds :class:`GaussianSubpop` entries or ``(mean, std, count, label)``
    tuples (``std`` is the per-dimension standard deviation, i.e. the square
    root of the covariance diagonal). Subpopulation ``i`` gets ``subpop_id = i``.
    """
    entries = [s if isinstance(s, GaussianSubpop) else GaussianSubpop(*s) for s in spec]
    if not entries:
        raise ValueError("need at least one subpopulation")
    d = len(entries[0].mean)
    rng = np.random.default_rng(seed)
    Xs, ys, ids, tags = [], [], [], []
    for i, e in enumerate(entries):
        mean = np.asarray(e.mean, dtype=float)
        std = np.broadcast_to(np.asarray(e.std, dtype=float), mean.shape) if np.ndim(e.std) == 0 \
            else np.asarray(e.std, dtype=float)
        if mean.shape != (d,) or std.shape != (d,):
            raise ValueError(f"subpopulation {i}: dimension mismatch (expected {d})")
        if int(e.count) < 1:
            raise ValueError(f"subpopulation {i}: count must be >= 1")
        Xs.append(mean + std * rng.standard_normal((int(e.count), d)))
        ys += [int(e.label)] * int(e.count)
        ids += [i] * int(e.count)
        tags += [e.annotation] * int(e.count)
    has_tags = any(t is not None for t in tags)
    return Dataset(np.vstack(Xs), ys, n_classes, annotations=tags if has_tags else None, subpop_ids=ids)


def load_csv(path, features: Sequence[str] = (), label: str = "label",
             categorical: Sequence[str] = (), annotation: Sequence[str] | str | None = None,
             classes: Sequence | None = None, exclusive: bool = False) -> Dataset:
    """Read a headered UTF-8 CSV according to an explicit column schema.

    Numeric ``features`` are used as-is; ``categorical`` columns are one-hot
    expanded (levels in sorted order). ``annotation`` columns are joined with
    ``"|"`` into one opaque tag. ``classes`` fixes the label order; labels not in
    it raise :class:`SchemaError`. With ``exclusive=True`` any column not named
    in the schema is an error.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if isinstance(annotation, str):
        annotation = [annotation]
    annotation = list(annotation or [])
    declared = list(features) + list(categorical) + [label] + annotation
    missing = [c for c in declared if c not in df.columns]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    if len(set(declared)) != len(declared):
        raise SchemaError("a column is declared with more than one role")
    extra = [c for c in df.columns if c not in declared]
    if exclusive and extra:
        raise SchemaError(f"undeclared columns: {extra}")
    if not features and not categorical:
        raise SchemaError("schema declares no feature columns")

    blocks = []
    for c in features:
        col = pd.to_numeric(df[c].str.strip(), errors="coerce")
        bad = col.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"non-numeric value {df[c].iloc[row]!r} in numeric column {c!r} (row {row})")
        blocks.append(col.to_numpy(dtype=float)[:, None])
    for c in categorical:
        levels = sorted(df[c].unique())
        blocks.append((df[c].to_numpy()[:, None] == np.array(levels)[None, :]).astype(float))
    X = np.hstack(blocks) if blocks else np.empty((len(df), 0))

    raw = df[label].str.strip()
    if classes is None:
        classes = sorted(raw.unique())
    classes = [str(c) for c in classes]
    lookup = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(raw) - set(lookup))
    if unknown:
        raise SchemaError(f"unknown label value(s) {unknown}; declared classes {classes}")
    y = raw.map(lookup).to_numpy(dtype=int)

    tags = None
    if annotation:
        tags = df[annotation].astype(str).agg("|".join, axis=1).tolist()
    return Dataset(X, y, len(classes), annotations=tags)
