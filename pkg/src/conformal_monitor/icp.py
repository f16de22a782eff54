"""Inductive conformal prediction and the three-valued assurance monitor.

A :class:`CalibratedMonitor` holds the sorted nonconformity scores of a
calibration set. The p-value of a test score ``s`` is the fraction of
calibration scores ``>= s``; a label enters the prediction set when its
p-value exceeds the significance level. The monitor reports whether the
set is empty, a single label, or several labels (reject).
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Dataset,
    DatasetError,
    Features,
    LabelUniverse,
    MonitorError,
    Verdict,
    check_epsilon,
)
from .nonconformity import NonconformityFunction, label_scores, score_matrix, true_label_scores

log = logging.getLogger(__name__)


class Inclusion(str, enum.Enum):
    STRICT = "strict"  # p > epsilon
    WEAK = "weak"  # p >= epsilon


@dataclass(frozen=True, eq=False)
class CalibratedMonitor:
    fn: NonconformityFunction
    calib_scores: np.ndarray
    universe: LabelUniverse
    inclusion: Inclusion = Inclusion.STRICT

    def __post_init__(self) -> None:
        a = np.array(self.calib_scores, dtype=np.float64, copy=True).reshape(-1)
        if a.size == 0:
            raise DatasetError("calibration produced no scores")
        if np.isnan(a).any():
            raise DatasetError("calibration scores contain NaN")
        if np.any(a[1:] < a[:-1]):
            raise ValueError("calibration scores must be sorted nondecreasing")
        a.flags.writeable = False
        object.__setattr__(self, "calib_scores", a)
        object.__setattr__(self, "inclusion", Inclusion(self.inclusion))
        if self.universe.size != self.fn.n_classes:
            raise ValueError("label universe and nonconformity function disagree on C")

    @property
    def m(self) -> int:
        return self.calib_scores.shape[0]

    @property
    def n_classes(self) -> int:
        return self.universe.size

    def p_values(self, scores) -> np.ndarray:
        """Vectorised p-values for an array of test scores of any shape."""
        s = np.asarray(scores, dtype=np.float64)
        if np.isnan(s).any():
            raise ValueError("nonconformity score is NaN")
        below = np.searchsorted(self.calib_scores, s, side="left")
        return (self.m - below) / self.m

    def included(self, p: np.ndarray, epsilon: float) -> np.ndarray:
        if self.inclusion is Inclusion.STRICT:
            return p > epsilon
        return p >= epsilon


@dataclass(frozen=True)
class PredictionResult:
    p_values: tuple[float, ...]
    prediction_set: tuple[int, ...]
    verdict: Verdict
    epsilon: float

    @property
    def predicted(self) -> int | None:
        """The single predicted label, or None unless the verdict is SINGLE."""
        return self.prediction_set[0] if self.verdict is Verdict.SINGLE else None


@dataclass(frozen=True)
class MonitorStep:
    index: int
    result: PredictionResult | None
    error: str | None
    latency_s: float


def calibrate(
    fn: NonconformityFunction,
    calib: Dataset,
    inclusion: Inclusion | str = Inclusion.STRICT,
) -> CalibratedMonitor:
    """Score each calibration example under its true label and freeze the sorted scores.

    ``fn`` must already be fitted on data disjoint from ``calib``.
    """
    if len(calib) == 0:
        raise DatasetError("empty calibration set")
    if calib.n_classes != fn.n_classes:
        raise DatasetError(
            f"calibration data has {calib.n_classes} classes, function expects {fn.n_classes}")
    scores = np.sort(true_label_scores(fn, calib), kind="stable")
    log.debug("calibrated %s on %d examples", fn.kind.value, len(scores))
    return CalibratedMonitor(fn, scores, calib.universe, Inclusion(inclusion))


def p_value(m: CalibratedMonitor, s: float) -> float:
    return float(m.p_values(s))


def label_p_values(m: CalibratedMonitor, x: Features) -> np.ndarray:
    return m.p_values(label_scores(m.fn, x))


def p_value_matrix(m: CalibratedMonitor, ds: Dataset) -> np.ndarray:
    """p-values of every example under every label, shape ``(n, C)``."""
    return m.p_values(score_matrix(m.fn, ds))


def result_from_p_values(m: CalibratedMonitor, p: np.ndarray, epsilon: float) -> PredictionResult:
    members = tuple(int(j) for j in np.flatnonzero(m.included(p, epsilon)))
    return PredictionResult(
        p_values=tuple(float(v) for v in p),
        prediction_set=members,
        verdict=Verdict.from_set_size(len(members)),
        epsilon=epsilon,
    )


def predict_set(m: CalibratedMonitor, x: Features, epsilon: float) -> PredictionResult:
    epsilon = check_epsilon(epsilon)
    return result_from_p_values(m, label_p_values(m, x), epsilon)


def monitor(
    m: CalibratedMonitor,
    stream: Iterable[Features],
    epsilon: float,
) -> list[MonitorStep]:
    """Run :func:`predict_set` over ``stream`` in order, timing each input.

    A failing input yields a step with ``error`` set; the stream continues.
    """
    epsilon = check_epsilon(epsilon)
    steps = []
    for i, x in enumerate(stream):
        t0 = time.perf_counter()
        try:
            res, err = predict_set(m, x, epsilon), None
        except (MonitorError, ValueError) as e:
            res, err = None, str(e)
        steps.append(MonitorStep(i, res, err, time.perf_counter() - t0))
    return steps


def second_largest(p: np.ndarray) -> np.ndarray:
    """Second-largest value along the last axis (ties count twice)."""
    return np.partition(np.asarray(p), -2, axis=-1)[..., -2]


def estimate_epsilon(m: CalibratedMonitor, validation: Dataset) -> float:
    """Smallest significance level that leaves no validation input with several labels.

    Under strict inclusion a set has two or more members exactly when its
    second-largest p-value exceeds epsilon, so the answer is the maximum
    second-largest p-value over the validation set. A zero maximum is
    lifted to ``1/m``, the smallest positive grid value.
    """
    if len(validation) == 0:
        raise DatasetError("empty validation set")
    s2 = float(second_largest(p_value_matrix(m, validation)).max())
    if m.inclusion is Inclusion.WEAK:
        # any epsilon in (s2, s2 + 1/m] gives the same sets; take the midpoint
        eps = s2 + 0.5 / m.m
    else:
        eps = s2 if s2 > 0 else 1.0 / m.m
    if eps >= 1.0:
        raise ValueError("no significance level below 1 removes every multiple prediction")
    return eps


def verdict_counts(results: Sequence[PredictionResult]) -> dict[Verdict, int]:
    out = {v: 0 for v in Verdict}
    for r in results:
        out[r.verdict] += 1
    return out
