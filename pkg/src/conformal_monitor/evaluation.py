"""Error, efficiency and latency measurements for a calibrated monitor.

Conventions: an input is an *error* when its true label is outside the
prediction set (so every empty set is an error). Every input falls in
exactly one of single, multiple or empty, independent of correctness.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, DatasetError, check_epsilon
from .icp import CalibratedMonitor, p_value_matrix, predict_set

try:  # optional: pin BLAS to one thread while timing
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@dataclass(frozen=True)
class EpsilonRow:
    epsilon: float
    error_rate: float
    multiple_rate: float
    empty_rate: float
    single_rate: float
    n: int


@dataclass(frozen=True)
class LatencyStats:
    mean_s: float
    p50_s: float
    p99_s: float
    n_timings: int
    repetitions: int
    artifact_bytes: int
    index_bytes: int


@dataclass(frozen=True)
class EvaluationReport:
    rows: tuple[EpsilonRow, ...]
    # epsilon -> running count of errors after each test input, in input order
    cumulative_errors: dict[float, tuple[int, ...]]
    latency: LatencyStats | None = None
    config: dict = field(default_factory=dict)

    def row(self, epsilon: float) -> EpsilonRow:
        for r in self.rows:
            if r.epsilon == epsilon:
                return r
        raise KeyError(epsilon)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "cumulative_errors": [
                {"epsilon": e, "counts": list(c)} for e, c in self.cumulative_errors.items()
            ],
            "latency": None if self.latency is None else asdict(self.latency),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvaluationReport:
        return cls(
            rows=tuple(EpsilonRow(**r) for r in d["rows"]),
            cumulative_errors={c["epsilon"]: tuple(c["counts"]) for c in d["cumulative_errors"]},
            latency=None if d.get("latency") is None else LatencyStats(**d["latency"]),
            config=d.get("config", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> EvaluationReport:
        return cls.from_dict(json.loads(text))


def _row(m: CalibratedMonitor, P: np.ndarray, labels: np.ndarray, eps: float):
    inside = m.included(P, eps)
    sizes = inside.sum(axis=1)
    errors = ~inside[np.arange(len(labels)), labels]
    n = len(labels)
    row = EpsilonRow(
        epsilon=eps,
        error_rate=float(errors.sum() / n),
        multiple_rate=float(np.sum(sizes > 1) / n),
        empty_rate=float(np.sum(sizes == 0) / n),
        single_rate=float(np.sum(sizes == 1) / n),
        n=n,
    )
    return row, errors


def _check_test(test: Dataset) -> None:
    if len(test) == 0:
        raise DatasetError("empty test set")


def evaluate(
    m: CalibratedMonitor,
    test: Dataset,
    eps_list: Sequence[float],
    p_values: np.ndarray | None = None,
) -> EvaluationReport:
    """Per-epsilon error/multiple/empty rates and cumulative error curves.

    ``p_values`` may pass a precomputed ``(n, C)`` matrix for ``test``.
    """
    _check_test(test)
    if not len(eps_list):
        raise ValueError("eps_list must not be empty")
    eps_list = [check_epsilon(e) for e in eps_list]
    P = p_value_matrix(m, test) if p_values is None else p_values
    rows, curves = [], {}
    for eps in eps_list:
        row, errors = _row(m, P, test.labels, eps)
        rows.append(row)
        curves[eps] = tuple(int(c) for c in np.cumsum(errors))
    config = {"function": m.fn.describe(), "calibration_size": m.m,
              "inclusion": m.inclusion.value, "n_test": len(test)}
    return EvaluationReport(tuple(rows), curves, None, config)


@dataclass(frozen=True)
class CurvePoint:
    epsilon: float
    error_rate: float
    multiple_rate: float
    empty_rate: float


def epsilon_grid(start: float = 0.001, stop: float = 0.1, step: float = 0.001) -> list[float]:
    if not step > 0 or stop < start:
        raise ValueError("grid needs step > 0 and stop >= start")
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 12) for i in range(n)]


def calibration_curve(
    m: CalibratedMonitor,
    test: Dataset,
    start: float = 0.001,
    stop: float = 0.1,
    step: float = 0.001,
    p_values: np.ndarray | None = None,
) -> list[CurvePoint]:
    """Error rate (calibration) and multiple rate (performance) over an epsilon grid."""
    _check_test(test)
    P = p_value_matrix(m, test) if p_values is None else p_values
    out = []
    for eps in epsilon_grid(start, stop, step):
        row, _ = _row(m, P, test.labels, check_epsilon(eps))
        out.append(CurvePoint(eps, row.error_rate, row.multiple_rate, row.empty_rate))
    return out


def artifact_size(m: CalibratedMonitor) -> int:
    from .io import save_monitor

    fd, path = tempfile.mkstemp(suffix=".bin")
    os.close(fd)
    try:
        save_monitor(m, path)
        return os.path.getsize(path)
    finally:
        os.unlink(path)


def benchmark_latency(
    m: CalibratedMonitor,
    test: Dataset,
    repetitions: int = 1,
    epsilon: float = 0.05,
    warmup: int = 20,
) -> LatencyStats:
    """Wall-clock time of :func:`predict_set` per test input.

    A warm-up pass over the first ``warmup`` inputs runs before timing.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    _check_test(test)
    feats = [test.features(i) for i in range(len(test))]
    limit = threadpool_limits(1) if threadpool_limits is not None else nullcontext()
    with limit:
        for x in feats[:warmup]:
            predict_set(m, x, epsilon)
        times = []
        for _ in range(repetitions):
            for x in feats:
                t0 = time.perf_counter()
                predict_set(m, x, epsilon)
                times.append(time.perf_counter() - t0)
    t = np.array(times)
    index_bytes = m.fn.index.nbytes if m.fn.index is not None else 0
    if m.fn.centroids is not None:
        index_bytes += m.fn.centroids.nbytes
    return LatencyStats(
        mean_s=float(t.mean()),
        p50_s=float(np.percentile(t, 50)),
        p99_s=float(np.percentile(t, 99)),
        n_timings=len(t),
        repetitions=repetitions,
        artifact_bytes=artifact_size(m),
        index_bytes=int(index_bytes + m.calib_scores.nbytes),
    )
