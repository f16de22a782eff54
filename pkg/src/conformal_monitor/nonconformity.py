"""Nonconformity functions: larger scores mean a stranger (input, label) pair.

Three functions work on embeddings (k-NN label disagreement, 1-NN distance
ratio, nearest-centroid distance ratio). Three work on class probabilities
(hinge, margin, Brier), and each of those also has a temperature-scaled
variant that rescales the logits before the softmax.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .core import (
    CalibrationDomainError,
    Dataset,
    DatasetError,
    FeatureMissingError,
    Features,
    softmax,
)
from .neighbors import NeighborIndex, build_index

DEFAULT_K = 15
TEMPERATURE_BOUNDS = (0.05, 50.0)
TEMPERATURE_TOL = 1e-4


class Kind(str, enum.Enum):
    KNN = "knn"
    ONE_NN = "1nn"
    CENTROID = "centroid"
    HINGE = "hinge"
    MARGIN = "margin"
    BRIER = "brier"
    TS_HINGE = "ts-hinge"
    TS_MARGIN = "ts-margin"
    TS_BRIER = "ts-brier"

    @property
    def uses_embedding(self) -> bool:
        return self in (Kind.KNN, Kind.ONE_NN, Kind.CENTROID)

    @property
    def uses_index(self) -> bool:
        return self in (Kind.KNN, Kind.ONE_NN)

    @property
    def temperature_scaled(self) -> bool:
        return self in (Kind.TS_HINGE, Kind.TS_MARGIN, Kind.TS_BRIER)

    @property
    def base(self) -> Kind:
        """The probability-space rule a temperature-scaled kind reduces to."""
        return {Kind.TS_HINGE: Kind.HINGE, Kind.TS_MARGIN: Kind.MARGIN,
                Kind.TS_BRIER: Kind.BRIER}.get(self, self)


@dataclass(frozen=True, eq=False)
class NonconformityFunction:
    """A scoring rule plus whatever state it was fitted with.

    Only the fields ``kind`` needs may be set: ``index`` for the neighbour
    kinds, ``k`` for k-NN, ``centroids`` (one row per class) for the
    centroid kind and ``temperature`` for the temperature-scaled kinds.
    """

    kind: Kind
    n_classes: int
    k: int | None = None
    temperature: float | None = None
    centroids: np.ndarray | None = None
    index: NeighborIndex | None = None

    def __post_init__(self) -> None:
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        wanted = {
            "k": kind is Kind.KNN,
            "temperature": kind.temperature_scaled,
            "centroids": kind is Kind.CENTROID,
            "index": kind.uses_index,
        }
        for name, needed in wanted.items():
            present = getattr(self, name) is not None
            if needed and not present:
                raise ValueError(f"{kind.value} requires {name}")
            if present and not needed:
                raise ValueError(f"{kind.value} does not take {name}")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.centroids is not None:
            c = np.array(self.centroids, dtype=np.float64, copy=True)
            if c.ndim != 2 or c.shape[0] != self.n_classes:
                raise ValueError("centroids must hold one row per class")
            c.flags.writeable = False
            object.__setattr__(self, "centroids", c)

    @property
    def embedding_dim(self) -> int | None:
        if self.index is not None:
            return self.index.dim
        if self.centroids is not None:
            return self.centroids.shape[1]
        return None

    def describe(self) -> dict:
        out: dict = {"kind": self.kind.value, "n_classes": self.n_classes}
        if self.k is not None:
            out["k"] = self.k
        if self.temperature is not None:
            out["temperature"] = self.temperature
        return out


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # x/0 -> +inf for every x >= 0, including 0/0
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(np.broadcast(num, den).shape, np.inf)
    ok = den > 0
    np.divide(num, den, out=out, where=ok)
    return out


def _min_excluding_self(d: np.ndarray) -> np.ndarray:
    """For each column j, min over the other columns of the last axis."""
    d = np.asarray(d, dtype=np.float64)
    order = np.argsort(d, axis=-1, kind="stable")
    lo = np.take_along_axis(d, order[..., :1], axis=-1)
    lo2 = np.take_along_axis(d, order[..., 1:2], axis=-1)
    is_min = np.zeros(d.shape, dtype=bool)
    np.put_along_axis(is_min, order[..., :1], True, axis=-1)
    return np.where(is_min, lo2, lo)


def _embedding(fn: NonconformityFunction, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != fn.embedding_dim:
        raise ValueError(f"embedding has dimension {v.shape[0]}, expected {fn.embedding_dim}")
    return v


def _check_label(fn: NonconformityFunction, y: int) -> int:
    y = int(y)
    if not 0 <= y < fn.n_classes:
        raise ValueError(f"label {y} outside [0, {fn.n_classes})")
    return y


# -- embedding-space scores -------------------------------------------------


def knn_label_scores(fn: NonconformityFunction, v) -> np.ndarray:
    """Scores for every label: how many of the k nearest labels differ."""
    ids, _ = fn.index.knn_arrays(_embedding(fn, v), fn.k)
    labels = fn.index.labels[ids]
    votes = np.bincount(labels, minlength=fn.n_classes)[: fn.n_classes]
    return (len(ids) - votes).astype(np.float64)


def knn_score(fn: NonconformityFunction, v, y: int) -> float:
    if fn.kind is not Kind.KNN:
        raise ValueError(f"expected a knn function, got {fn.kind.value}")
    return float(knn_label_scores(fn, v)[_check_label(fn, y)])


def one_nn_label_scores(fn: NonconformityFunction, v) -> np.ndarray:
    """Nearest same-class distance over nearest other-class distance, per label.

    Labels missing from the training index score NaN here; the public
    entry points turn that into :class:`CalibrationDomainError`.
    """
    idx = fn.index
    best = np.full(fn.n_classes, np.inf)
    in_range = (idx.classes >= 0) & (idx.classes < fn.n_classes)
    present = idx.classes[in_range]
    best[present] = np.sqrt(idx.nearest_per_class_arrays(_embedding(fn, v))[in_range])
    out = _ratio(best, _min_excluding_self(best))
    missing = np.ones(fn.n_classes, dtype=bool)
    missing[present] = False
    if len(present) < 2:
        missing[:] = True
    out[missing] = np.nan
    return out


def one_nn_score(fn: NonconformityFunction, v, y: int) -> float:
    if fn.kind is not Kind.ONE_NN:
        raise ValueError(f"expected a 1nn function, got {fn.kind.value}")
    s = one_nn_label_scores(fn, v)[_check_label(fn, y)]
    if math.isnan(s):
        raise CalibrationDomainError(
            f"label {y} (or every other label) has no training points in the index")
    return float(s)


def compute_centroids(train: Dataset) -> dict[int, np.ndarray]:
    """Mean embedding of each class in the universe of ``train``."""
    if train.embeddings is None:
        raise FeatureMissingError("centroids need embeddings")
    C = train.n_classes
    counts = np.bincount(train.labels, minlength=C)
    empty = np.flatnonzero(counts[:C] == 0)
    if len(empty):
        raise DatasetError(f"classes without training examples: {empty.tolist()}")
    out = {}
    for c in range(C):
        out[c] = train.embeddings[train.labels == c].mean(axis=0)
    return out


def centroid_label_scores(fn: NonconformityFunction, v) -> np.ndarray:
    diff = fn.centroids - _embedding(fn, v)
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return _ratio(d, _min_excluding_self(d))


def centroid_score(fn: NonconformityFunction, v, y: int) -> float:
    if fn.kind is not Kind.CENTROID:
        raise ValueError(f"expected a centroid function, got {fn.kind.value}")
    return float(centroid_label_scores(fn, v)[_check_label(fn, y)])


# -- probability-space scores -----------------------------------------------
# Each *_matrix function takes probabilities of shape (..., C) and returns the
# score of every candidate label with the same shape.


def hinge_matrix(p: np.ndarray) -> np.ndarray:
    return 1.0 - np.asarray(p, dtype=np.float64)


def margin_matrix(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -_min_excluding_self(-p) - p


def brier_matrix(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    C = p.shape[-1]
    sq = np.sum(p * p, axis=-1, keepdims=True)
    # sum_i (1[i == y] - p_i)^2 expanded around the candidate y
    return (sq - 2.0 * p + 1.0) / C


def hinge_score(p, y: int) -> float:
    """``1 - p[y]``. Gives wide prediction sets in practice; prefer margin."""
    return float(1.0 - np.asarray(p, dtype=np.float64)[int(y)])


def margin_score(p, y: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = int(y)
    return float(np.max(np.delete(p, y)) - p[y])


def brier_score(p, y: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    target = np.zeros_like(p)
    target[int(y)] = 1.0
    return float(np.mean((target - p) ** 2))


_PROB_RULES: dict[Kind, Callable[[np.ndarray], np.ndarray]] = {
    Kind.HINGE: hinge_matrix,
    Kind.MARGIN: margin_matrix,
    Kind.BRIER: brier_matrix,
}


def apply_temperature(z, T: float) -> np.ndarray:
    """Softmax of ``z / T`` along the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    return softmax(np.asarray(z, dtype=np.float64) / T)


def mean_nll(logits: np.ndarray, labels: np.ndarray, T: float = 1.0) -> float:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits / T)``."""
    z = np.asarray(logits, dtype=np.float64) / T
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - z[np.arange(len(z)), labels]))


_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(f: Callable[[float], float], lo: float, hi: float,
                       tol: float) -> float:
    """Minimiser of a unimodal ``f`` on ``[lo, hi]`` to within ``tol``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    # the bracket midpoint can sit above an endpoint when f is monotone
    cands = [(f(x), x) for x in (lo, (a + b) / 2, hi) if lo <= x <= hi]
    return min(cands)[1]


def fit_temperature(validation: Dataset, bounds: tuple[float, float] = TEMPERATURE_BOUNDS,
                    tol: float = TEMPERATURE_TOL) -> float:
    """Temperature minimising validation NLL, found by golden-section search.

    NLL is convex in ``1/T``, so it is unimodal in ``T`` and the bracket
    search is exact up to ``tol``.
    """
    if len(validation) == 0:
        raise DatasetError("temperature fit needs a nonempty validation set")
    if validation.logits is None:
        raise FeatureMissingError("temperature fit needs logits")
    z, y = validation.logits, validation.labels
    return golden_section_min(lambda T: mean_nll(z, y, T), bounds[0], bounds[1], tol)


# -- dispatch ---------------------------------------------------------------


def _probabilities(fn: NonconformityFunction, probs, logits) -> np.ndarray:
    if fn.kind.temperature_scaled:
        if logits is None:
            raise FeatureMissingError(f"{fn.kind.value} needs logits")
        return apply_temperature(logits, fn.temperature)
    if probs is not None:
        return np.asarray(probs, dtype=np.float64)
    if logits is not None:
        return softmax(logits)
    raise FeatureMissingError(f"{fn.kind.value} needs probs or logits")


def label_scores(fn: NonconformityFunction, x: Features) -> np.ndarray:
    """Score of ``x`` under every candidate label, shape ``(C,)``."""
    if fn.kind.uses_embedding:
        if x.embedding is None:
            raise FeatureMissingError(f"{fn.kind.value} needs an embedding")
        if fn.kind is Kind.KNN:
            return knn_label_scores(fn, x.embedding)
        if fn.kind is Kind.ONE_NN:
            out = one_nn_label_scores(fn, x.embedding)
            if np.isnan(out).any():
                raise CalibrationDomainError(
                    "labels without training points: "
                    f"{np.flatnonzero(np.isnan(out)).tolist()}")
            return out
        return centroid_label_scores(fn, x.embedding)
    p = _probabilities(fn, x.probs, x.logits)
    if p.shape[-1] != fn.n_classes:
        raise ValueError(f"expected {fn.n_classes} class scores, got {p.shape[-1]}")
    return _PROB_RULES[fn.kind.base](p)


def score(fn: NonconformityFunction, x: Features, y: int) -> float:
    """Nonconformity of ``x`` paired with candidate label ``y``."""
    y = _check_label(fn, y)
    if fn.kind is Kind.ONE_NN:
        if x.embedding is None:
            raise FeatureMissingError("1nn needs an embedding")
        return one_nn_score(fn, x.embedding, y)
    return float(label_scores(fn, x)[y])


def score_matrix(fn: NonconformityFunction, ds: Dataset) -> np.ndarray:
    """Scores of every example under every label, shape ``(n, C)``."""
    if fn.kind.uses_embedding:
        if ds.embeddings is None:
            raise FeatureMissingError(f"{fn.kind.value} needs embeddings")
        out = np.empty((len(ds), fn.n_classes))
        for i in range(len(ds)):
            out[i] = label_scores(fn, Features(embedding=ds.embeddings[i]))
        return out
    p = _probabilities(fn, ds.probs, ds.logits)
    return _PROB_RULES[fn.kind.base](p)


def true_label_scores(fn: NonconformityFunction, ds: Dataset) -> np.ndarray:
    """Score of each example under its own ground-truth label."""
    if fn.kind is Kind.ONE_NN:
        if ds.embeddings is None:
            raise FeatureMissingError("1nn needs embeddings")
        return np.array([one_nn_score(fn, v, y) for v, y in zip(ds.embeddings, ds.labels)])
    return score_matrix(fn, ds)[np.arange(len(ds)), ds.labels]


def build_function(
    kind: Kind | str,
    train: Dataset,
    *,
    k: int = DEFAULT_K,
    validation: Dataset | None = None,
    temperature: float | None = None,
) -> NonconformityFunction:
    """Fit a nonconformity function on proper-training (and validation) data.

    Neighbour kinds index the training embeddings, the centroid kind stores
    class means, and temperature-scaled kinds use ``temperature`` if given,
    else fit it on ``validation``.
    """
    kind = Kind(kind)
    C = train.n_classes
    if kind.uses_index:
        if train.embeddings is None:
            raise FeatureMissingError(f"{kind.value} needs training embeddings")
        index = build_index(train.embeddings, train.labels)
        return NonconformityFunction(kind, C, k=k if kind is Kind.KNN else None, index=index)
    if kind is Kind.CENTROID:
        cents = compute_centroids(train)
        return NonconformityFunction(kind, C, centroids=np.vstack([cents[c] for c in range(C)]))
    if kind.temperature_scaled:
        if temperature is None:
            if validation is None:
                raise ValueError(f"{kind.value} needs a temperature or a validation set")
            temperature = fit_temperature(validation)
        return NonconformityFunction(kind, C, temperature=float(temperature))
    return NonconformityFunction(kind, C)


def centroids_from_mapping(cents: Mapping[int, np.ndarray], n_classes: int) -> np.ndarray:
    missing = [c for c in range(n_classes) if c not in cents]
    if missing:
        raise ValueError(f"centroids missing for classes {missing}")
    return np.vstack([np.asarray(cents[c], dtype=np.float64) for c in range(n_classes)])
