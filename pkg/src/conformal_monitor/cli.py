"""Command-line entry point: ``conformal-monitor <command> [flags]``.

Exit codes: 0 success, 1 data or validation error, 2 usage error.
Machine-readable output (CSV/JSON) goes to stdout or ``--out``; diagnostics
go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence, TextIO

from . import io as fio
from .core import MonitorError, Role, check_epsilon
from .evaluation import benchmark_latency, calibration_curve, evaluate
from .icp import (
    CalibratedMonitor,
    Inclusion,
    PredictionResult,
    calibrate,
    estimate_epsilon,
    p_value_matrix,
    predict_set,
)
from .nonconformity import DEFAULT_K, Kind, build_function
from .refmodel import TrainConfig, accuracy, export_features, train

log = logging.getLogger("conformal_monitor")


class UsageError(Exception):
    pass


def _epsilon_arg(value: str) -> str:
    if value == "auto":
        return value
    try:
        check_epsilon(float(value))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1) or 'auto', got {value!r}")
    return value


def _resolve_epsilon(value: str, mon: CalibratedMonitor, validation: str | None) -> float:
    if value != "auto":
        return float(value)
    if not validation:
        raise UsageError("--epsilon auto requires --validation")
    return estimate_epsilon(mon, fio.load_feature_file(validation, Role.VALIDATION))


def _result_row(ident: str, r: PredictionResult) -> list[str]:
    return [ident, r.verdict.value, ";".join(str(j) for j in r.prediction_set),
            *(repr(p) for p in r.p_values)]


def _open_out(path: str | None) -> TextIO:
    return open(path, "w", encoding="utf-8", newline="") if path else sys.stdout


def _emit_json(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- commands ----------------------------------------------------------------


def cmd_train_ref(a: argparse.Namespace) -> int:
    if bool(a.data) == bool(a.scitos):
        raise UsageError("give exactly one of --data or --scitos")
    data = fio.load_scitos(a.scitos) if a.scitos else fio.load_tabular_file(a.data)
    cfg = fio.SplitConfig(a.test_fraction, a.train_fraction, a.calib_share, a.seed,
                          a.share_calib_validation)
    parts = fio.split(data, cfg)
    tcfg = TrainConfig(learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch_size,
                       seed=a.train_seed, early_stop_patience=a.patience, hidden=a.hidden)
    model = train(parts.train, tcfg)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fio.save_model(model, out / "model.bin")
    for name, part in zip(parts._fields, parts):
        fio.write_tabular_file(part, out / f"{name}.csv")
    _emit_json({
        "hidden": model.hidden,
        "epochs_run": len(model.history),
        "train_accuracy": accuracy(model, parts.train),
        "test_accuracy": accuracy(model, parts.test),
        "sizes": {name: len(part) for name, part in zip(parts._fields, parts)},
    }, None)
    return 0


def cmd_extract(a: argparse.Namespace) -> int:
    model = fio.load_model(a.model)
    data = fio.load_tabular_file(a.input)
    feats = export_features(model, data)
    text = fio.dumps_feature_file(feats, a.columns)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_calibrate(a: argparse.Namespace) -> int:
    kind = Kind(a.fn)
    train_ds = fio.load_feature_file(a.train, Role.TRAIN)
    calib = fio.load_feature_file(a.calib, Role.CALIBRATION)
    validation = None
    if kind.temperature_scaled and a.temperature is None:
        if not a.validation:
            raise UsageError(f"--fn {kind.value} needs --temperature or --validation")
        validation = fio.load_feature_file(a.validation, Role.VALIDATION)
    fn = build_function(kind, train_ds, k=a.k, validation=validation, temperature=a.temperature)
    mon = calibrate(fn, calib, Inclusion(a.inclusion))
    fio.save_monitor(mon, a.out)
    log.info("wrote %s (%d calibration scores)", a.out, mon.m)
    return 0


def cmd_estimate_epsilon(a: argparse.Namespace) -> int:
    mon = fio.load_monitor(a.monitor)
    eps = estimate_epsilon(mon, fio.load_feature_file(a.validation, Role.VALIDATION))
    sys.stdout.write(repr(eps) + "\n")
    return 0


def cmd_predict(a: argparse.Namespace) -> int:
    mon = fio.load_monitor(a.monitor)
    eps = _resolve_epsilon(a.epsilon, mon, a.validation)
    ids, feats = fio.load_inputs(a.input)
    out = _open_out(a.out)
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["id", "verdict", "set"] + [f"p{j}" for j in range(mon.n_classes)])
        for ident, x in zip(ids, feats):
            w.writerow(_result_row(ident, predict_set(mon, x, eps)))
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_monitor(a: argparse.Namespace, stdin: TextIO | None = None) -> int:
    mon = fio.load_monitor(a.monitor)
    eps = _resolve_epsilon(a.epsilon, mon, a.validation)
    stdin = stdin or sys.stdin
    parser = None
    failures = 0
    w = csv.writer(sys.stdout, lineterminator="\n")
    for lineno, line in enumerate(stdin, start=1):
        line = line.strip()
        if not line:
            continue
        row = next(csv.reader([line]))
        if parser is None and row[0] == "id":
            parser = fio.FeatureRowParser(row)
            continue
        if parser is None:
            parser = fio.FeatureRowParser.for_function(mon.fn)
        try:
            ident, _, x = parser.parse(row)
            w.writerow(_result_row(ident, predict_set(mon, x, eps)))
        except (MonitorError, ValueError) as e:
            failures += 1
            w.writerow([row[0], "error", ""])
            print(f"line {lineno}: {e}", file=sys.stderr)
        sys.stdout.flush()
    return 1 if failures else 0


def cmd_evaluate(a: argparse.Namespace) -> int:
    mon = fio.load_monitor(a.monitor)
    test = fio.load_feature_file(a.test, Role.TEST)
    eps_list = []
    for e in a.epsilon.split(","):
        eps_list.append(_resolve_epsilon(_epsilon_arg(e.strip()), mon, a.validation))
    P = p_value_matrix(mon, test)
    report = evaluate(mon, test, eps_list, p_values=P)
    curve = calibration_curve(mon, test, a.grid_start, a.grid_stop, a.grid_step, p_values=P)
    if a.out_dir:
        fio.write_report(report, a.out_dir, curve)
    _emit_json({"rows": report.to_dict()["rows"], "config": report.config}, None)
    return 0


def cmd_bench(a: argparse.Namespace) -> int:
    if a.synthetic:
        mon, test = _synthetic_bench_setup(a.synthetic, Kind(a.fn), a.seed)
    else:
        if not (a.monitor and a.test):
            raise UsageError("give --monitor and --test, or --synthetic")
        mon = fio.load_monitor(a.monitor)
        test = fio.load_feature_file(a.test, Role.TEST)
    if a.limit:
        test = test.subset(range(min(a.limit, len(test))))
    stats = benchmark_latency(mon, test, repetitions=a.repetitions, epsilon=a.epsilon)
    _emit_json({"function": mon.fn.describe(), "n_inputs": len(test),
                "latency": vars(stats)}, a.out)
    return 0


def _synthetic_bench_setup(scale: str, kind: Kind, seed: int):
    from .synthetic import clustered_encodings

    n, d, C = {"scitos": (3928, 20, 4), "gtsrb": (19180, 128, 43)}[scale]
    pool = clustered_encodings(n + 2000, d, C, seed=seed)
    train_ds = pool.subset(range(n), Role.TRAIN)
    calib = pool.subset(range(n, n + 1000), Role.CALIBRATION)
    test = pool.subset(range(n + 1000, n + 2000), Role.TEST)
    fn = build_function(kind, train_ds, temperature=1.0 if kind.temperature_scaled else None)
    return calibrate(fn, calib), test


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conformal-monitor", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-ref", help="train the reference MLP and write splits")
    s.add_argument("--data", help="tabular CSV (id,label,x0..)")
    s.add_argument("--scitos", help="UCI wall-following data file")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0, help="split seed")
    s.add_argument("--test-fraction", type=float, default=0.10)
    s.add_argument("--train-fraction", type=float, default=0.80)
    s.add_argument("--calib-share", type=float, default=0.50)
    s.add_argument("--share-calib-validation", action="store_true")
    s.add_argument("--hidden", type=int, default=None)
    s.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    s.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    s.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    s.add_argument("--patience", type=int, default=TrainConfig.early_stop_patience)
    s.add_argument("--train-seed", type=int, default=0)
    s.set_defaults(func=cmd_train_ref)

    s = sub.add_parser("extract", help="export embeddings and logits from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--columns", default="ez", help="subset of 'ezp' to write")
    s.add_argument("--out")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("calibrate", help="fit a nonconformity function and calibrate")
    s.add_argument("--fn", required=True, choices=[k.value for k in Kind])
    s.add_argument("--k", type=int, default=DEFAULT_K)
    s.add_argument("--train", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--validation")
    s.add_argument("--temperature", type=float)
    s.add_argument("--inclusion", choices=[i.value for i in Inclusion], default="strict")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("estimate-epsilon", help="smallest epsilon with no multiple sets")
    s.add_argument("--monitor", required=True)
    s.add_argument("--validation", required=True)
    s.set_defaults(func=cmd_estimate_epsilon)

    for name, func, helptext in (("predict", cmd_predict, "prediction sets for a file"),
                                 ("monitor", cmd_monitor, "verdicts for rows on stdin")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--monitor", required=True)
        s.add_argument("--epsilon", required=True, type=_epsilon_arg)
        s.add_argument("--validation")
        if name == "predict":
            s.add_argument("--input", required=True)
            s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="error/multiple rates and curves on a test set")
    s.add_argument("--monitor", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--epsilon", default="0.01,0.02,0.05,0.1",
                   help="comma-separated levels; 'auto' adds the estimated one")
    s.add_argument("--validation")
    s.add_argument("--grid-start", type=float, default=0.001)
    s.add_argument("--grid-stop", type=float, default=0.1)
    s.add_argument("--grid-step", type=float, default=0.001)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench", help="per-input latency of predict_set")
    s.add_argument("--monitor")
    s.add_argument("--test")
    s.add_argument("--synthetic", choices=["scitos", "gtsrb"])
    s.add_argument("--fn", default="knn", choices=[k.value for k in Kind])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repetitions", type=int, default=1)
    s.add_argument("--epsilon", type=float, default=0.05)
    s.add_argument("--limit", type=int, default=0, help="time only the first N inputs")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (MonitorError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
