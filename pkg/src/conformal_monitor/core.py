"""Domain types shared across the package.

Everything here is immutable once built. Arrays held by a :class:`Dataset`
are flagged read-only so a dataset can be shared between threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

PROB_SUM_TOL = 1e-6


class MonitorError(Exception):
    """Base class for errors raised by this package."""


class DatasetError(MonitorError, ValueError):
    """A dataset or feature file failed validation."""


class FeatureMissingError(MonitorError, ValueError):
    """An input lacks the feature kind a nonconformity function needs."""


class CalibrationDomainError(MonitorError, ValueError):
    """A score was requested for a label the training data never saw."""


class Role(str, enum.Enum):
    TRAIN = "proper-training"
    CALIBRATION = "calibration"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True)
class LabelUniverse:
    """Dense label indices ``0..C-1`` with optional display names."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.names) < 2:
            raise DatasetError(f"need at least 2 classes, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise DatasetError("label names must be unique")

    @classmethod
    def of_size(cls, n_classes: int) -> LabelUniverse:
        return cls(tuple(str(i) for i in range(n_classes)))

    @property
    def size(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DatasetError(f"unknown label {name!r}") from None

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True, kw_only=True)
class Features:
    """Model outputs for one input. At least one field must be set."""

    embedding: np.ndarray | None = None
    probs: np.ndarray | None = None
    logits: np.ndarray | None = None


@dataclass(frozen=True, kw_only=True)
class LabeledExample(Features):
    id: str
    label: int


def _readonly(a: np.ndarray | None, dtype=np.float64) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labelled collection of feature vectors stored column-wise.

    ``embeddings`` is ``(n, d)``; ``probs`` and ``logits`` are ``(n, C)``.
    Construction never raises on bad values; call :func:`validate_dataset`
    to get the list of broken invariants.
    """

    ids: tuple[str, ...]
    labels: np.ndarray
    universe: LabelUniverse
    embeddings: np.ndarray | None = None
    probs: np.ndarray | None = None
    logits: np.ndarray | None = None
    role: Role | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "labels", _readonly(self.labels, np.int64).reshape(-1))
        for name in ("embeddings", "probs", "logits"):
            a = _readonly(getattr(self, name))
            if a is not None and a.ndim == 1:
                a = a.reshape(len(self.ids), -1)
            object.__setattr__(self, name, a)

    @classmethod
    def from_examples(
        cls,
        examples: Sequence[LabeledExample],
        universe: LabelUniverse,
        role: Role | None = None,
    ) -> Dataset:
        def stack(attr: str) -> np.ndarray | None:
            vals = [getattr(e, attr) for e in examples]
            if not vals or all(v is None for v in vals):
                return None
            if any(v is None for v in vals):
                raise DatasetError(f"feature {attr!r} present on some examples but not all")
            rows = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vals]
            if len({r.size for r in rows}) != 1:
                raise DatasetError(f"ragged {attr} vectors")
            return np.vstack(rows)

        return cls(
            ids=tuple(e.id for e in examples),
            labels=np.array([e.label for e in examples], dtype=np.int64),
            universe=universe,
            embeddings=stack("embedding"),
            probs=stack("probs"),
            logits=stack("logits"),
            role=role,
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return self.universe.size

    @property
    def embedding_dim(self) -> int | None:
        return None if self.embeddings is None else self.embeddings.shape[1]

    def example(self, i: int) -> LabeledExample:
        return LabeledExample(
            id=self.ids[i],
            label=int(self.labels[i]),
            embedding=None if self.embeddings is None else self.embeddings[i],
            probs=None if self.probs is None else self.probs[i],
            logits=None if self.logits is None else self.logits[i],
        )

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self.example(i)

    def features(self, i: int) -> Features:
        return Features(
            embedding=None if self.embeddings is None else self.embeddings[i],
            probs=None if self.probs is None else self.probs[i],
            logits=None if self.logits is None else self.logits[i],
        )

    def subset(self, rows: Sequence[int] | np.ndarray, role: Role | None = None) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return Dataset(
            ids=tuple(self.ids[i] for i in rows),
            labels=self.labels[rows],
            universe=self.universe,
            embeddings=pick(self.embeddings),
            probs=pick(self.probs),
            logits=pick(self.logits),
            role=self.role if role is None else role,
        )

    def with_role(self, role: Role) -> Dataset:
        return Dataset(self.ids, self.labels, self.universe, self.embeddings,
                       self.probs, self.logits, role)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.ids, self.universe, self.role) != (other.ids, other.universe, other.role):
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        for name in ("embeddings", "probs", "logits"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class TabularData:
    """Raw numeric inputs with labels, the input to the reference model."""

    ids: tuple[str, ...]
    X: np.ndarray
    labels: np.ndarray
    universe: LabelUniverse
    role: Role | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "X", _readonly(np.atleast_2d(self.X)))
        object.__setattr__(self, "labels", _readonly(self.labels, np.int64).reshape(-1))
        if self.X.shape[0] != len(self.ids) or self.labels.shape[0] != len(self.ids):
            raise DatasetError("ids, X and labels disagree on the number of rows")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, rows: Sequence[int] | np.ndarray, role: Role | None = None) -> TabularData:
        rows = np.asarray(rows, dtype=np.int64)
        return TabularData(
            ids=tuple(self.ids[i] for i in rows),
            X=self.X[rows],
            labels=self.labels[rows],
            universe=self.universe,
            role=self.role if role is None else role,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TabularData):
            return NotImplemented
        return (
            (self.ids, self.universe, self.role) == (other.ids, other.universe, other.role)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]


def check_epsilon(epsilon: float) -> float:
    """Return ``epsilon`` as float, raising if it is outside (0, 1)."""
    epsilon = float(epsilon)
    if not (0.0 < epsilon < 1.0) or math.isnan(epsilon):
        raise ValueError(f"significance level must lie in (0, 1), got {epsilon}")
    return epsilon


@dataclass(frozen=True)
class Violation:
    example_id: str | None
    rule: str

    def __str__(self) -> str:
        where = "dataset" if self.example_id is None else f"example {self.example_id}"
        return f"{where}: {self.rule}"


def validate_dataset(ds: Dataset) -> list[Violation]:
    """List every broken invariant of ``ds``; an empty list means valid."""
    out: list[Violation] = []
    n = len(ds)
    if n == 0:
        return [Violation(None, "empty dataset")]
    if ds.labels.shape != (n,):
        out.append(Violation(None, f"expected {n} labels, got {ds.labels.shape[0]}"))
        return out
    if ds.embeddings is None and ds.probs is None and ds.logits is None:
        out.append(Violation(None, "no embedding, probs or logits present"))
    if len(set(ds.ids)) != n:
        out.append(Violation(None, "duplicate example ids"))

    C = ds.n_classes
    for i in np.flatnonzero((ds.labels < 0) | (ds.labels >= C)):
        out.append(Violation(ds.ids[i], f"label {int(ds.labels[i])} outside [0, {C})"))

    for name, width in (("embeddings", None), ("probs", C), ("logits", C)):
        a = getattr(ds, name)
        if a is None:
            continue
        if a.ndim != 2 or a.shape[0] != n:
            out.append(Violation(None, f"{name} has shape {a.shape}, expected ({n}, ...)"))
            continue
        if width is not None and a.shape[1] != width:
            out.append(Violation(None, f"{name} has {a.shape[1]} columns, expected {width}"))
            continue
        if name == "embeddings" and a.shape[1] == 0:
            out.append(Violation(None, "embedding dimension is zero"))
        for i in np.flatnonzero(~np.isfinite(a).all(axis=1)):
            out.append(Violation(ds.ids[i], f"non-finite value in {name}"))

    p = ds.probs
    if p is not None and p.ndim == 2 and p.shape == (n, C):
        finite = np.isfinite(p).all(axis=1)
        out_of_range = finite & ((p < 0) | (p > 1)).any(axis=1)
        bad_sum = finite & (np.abs(p.sum(axis=1) - 1.0) > PROB_SUM_TOL)
        for i in np.flatnonzero(out_of_range):
            out.append(Violation(ds.ids[i], "probability outside [0, 1]"))
        for i in np.flatnonzero(bad_sum):
            out.append(Violation(ds.ids[i], f"probabilities sum to {p[i].sum():.9g}, not 1"))
    return out


def require_valid(ds: Dataset) -> Dataset:
    problems = validate_dataset(ds)
    if problems:
        head = "; ".join(str(v) for v in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise DatasetError(f"invalid dataset: {head}{more}")
    return ds


class Verdict(enum.Enum):
    """Monitor output: no credible label, one label, or several."""

    EMPTY = "0"
    SINGLE = "1"
    REJECT = "reject"

    @classmethod
    def from_set_size(cls, size: int) -> Verdict:
        if size == 0:
            return cls.EMPTY
        if size == 1:
            return cls.SINGLE
        return cls.REJECT


__all__ = [
    "CalibrationDomainError",
    "Dataset",
    "DatasetError",
    "FeatureMissingError",
    "Features",
    "LabelUniverse",
    "LabeledExample",
    "MonitorError",
    "Role",
    "TabularData",
    "Verdict",
    "Violation",
    "check_epsilon",
    "require_valid",
    "softmax",
    "validate_dataset",
]
