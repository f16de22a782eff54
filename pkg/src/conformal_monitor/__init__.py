"""Inductive conformal prediction monitors for classifiers.

Typical use::

    fn = build_function("knn", train, k=15)
    mon = calibrate(fn, calib)
    eps = estimate_epsilon(mon, validation)
    result = predict_set(mon, test.features(0), eps)
"""

from .core import (
    CalibrationDomainError,
    Dataset,
    DatasetError,
    FeatureMissingError,
    Features,
    LabeledExample,
    LabelUniverse,
    MonitorError,
    Role,
    TabularData,
    Verdict,
    validate_dataset,
)
from .evaluation import (
    EvaluationReport,
    benchmark_latency,
    calibration_curve,
    evaluate,
)
from .icp import (
    CalibratedMonitor,
    Inclusion,
    PredictionResult,
    calibrate,
    estimate_epsilon,
    monitor,
    p_value,
    predict_set,
)
from .neighbors import NeighborHit, NeighborIndex, build_index, query_knn, query_nearest_per_class
from .nonconformity import (
    Kind,
    NonconformityFunction,
    apply_temperature,
    build_function,
    fit_temperature,
    score,
)

__version__ = "0.1.0"

__all__ = [
    "CalibratedMonitor",
    "CalibrationDomainError",
    "Dataset",
    "DatasetError",
    "EvaluationReport",
    "FeatureMissingError",
    "Features",
    "Inclusion",
    "Kind",
    "LabelUniverse",
    "LabeledExample",
    "MonitorError",
    "NeighborHit",
    "NeighborIndex",
    "NonconformityFunction",
    "PredictionResult",
    "Role",
    "TabularData",
    "Verdict",
    "apply_temperature",
    "benchmark_latency",
    "build_function",
    "build_index",
    "calibrate",
    "calibration_curve",
    "estimate_epsilon",
    "evaluate",
    "fit_temperature",
    "monitor",
    "p_value",
    "predict_set",
    "query_knn",
    "query_nearest_per_class",
    "score",
    "validate_dataset",
]
