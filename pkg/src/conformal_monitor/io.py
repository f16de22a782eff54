"""File formats: feature CSVs, raw tabular CSVs, splits and binary artifacts.

Feature files are CSV with one header row ``id,label,<columns>``. Column
names carry a one-letter prefix: ``e`` for embedding, ``z`` for logits, ``p``
for probabilities and ``x`` for raw tabular inputs. An optional first line
``#icp-features,version=1,labels=a|b|c`` records the label-name table.
Labels in rows may be indices or names from that table.

Monitor and model artifacts share one binary container::

    magic (8 bytes) | version u16 | kind u16 | n_sections u32
    n_sections x [name_len u16 | name | payload_len u64 | payload]
    crc32 u32 over all preceding bytes

Array payloads are ``dtype char | ndim u8 | shape u64... | data`` with
little-endian 64-bit floats or ints.
"""

from __future__ import annotations

import csv
import io as _stdio
import json
import math
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, TypeVar

import numpy as np

from .core import (
    Dataset,
    DatasetError,
    Features,
    LabelUniverse,
    MonitorError,
    Role,
    TabularData,
    require_valid,
    softmax,
)
from .evaluation import CurvePoint, EvaluationReport
from .icp import CalibratedMonitor, Inclusion
from .neighbors import NeighborIndex, TreeArrays
from .nonconformity import Kind, NonconformityFunction
from .refmodel import MlpModel

FORMAT_VERSION = 1
FEATURE_MAGIC = "#icp-features"
TABULAR_MAGIC = "#icp-tabular"
ARTIFACT_MAGIC = b"ICPMONv\x00"
KIND_MONITOR = 1
KIND_MODEL = 2
_COLUMN = re.compile(r"^([ezpx])(\d+)$")


class ArtifactError(MonitorError):
    """A binary artifact is corrupt, truncated or of the wrong kind."""


def fmt(x: float) -> str:
    """Render a float with 9 significant digits."""
    return format(float(x), ".9g")


# -- CSV feature and tabular files -------------------------------------------


def _parse_meta(line: str, magic: str) -> tuple[int, tuple[str, ...] | None]:
    parts = line.strip().split(",")
    if parts[0] != magic:
        raise DatasetError(f"expected {magic!r} metadata line, got {parts[0]!r}")
    version, labels = FORMAT_VERSION, None
    for p in parts[1:]:
        key, _, val = p.partition("=")
        if key == "version":
            version = int(val)
        elif key == "labels":
            labels = tuple(val.split("|"))
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported feature file version {version}")
    return version, labels


def _meta_line(magic: str, universe: LabelUniverse) -> str:
    for name in universe.names:
        if any(ch in name for ch in ",|\n\r"):
            raise DatasetError(f"label name {name!r} cannot be stored in a CSV header")
    return f"{magic},version={FORMAT_VERSION},labels={'|'.join(universe.names)}\n"


@dataclass(frozen=True)
class _Header:
    labels: tuple[str, ...] | None
    groups: dict[str, list[int]]  # prefix -> column positions in row order
    has_label: bool


def _parse_header(cols: list[str], magic_labels, allowed: str, need_label: bool) -> _Header:
    if not cols or cols[0] != "id":
        raise DatasetError("header must start with 'id'")
    has_label = len(cols) > 1 and cols[1] == "label"
    if need_label and not has_label:
        raise DatasetError("header must be 'id,label,...'")
    groups: dict[str, list[tuple[int, int]]] = {}
    for pos, name in enumerate(cols[2 if has_label else 1:], start=2 if has_label else 1):
        m = _COLUMN.match(name)
        if not m or m.group(1) not in allowed:
            raise DatasetError(f"unrecognised column {name!r}")
        groups.setdefault(m.group(1), []).append((int(m.group(2)), pos))
    out = {}
    for prefix, items in groups.items():
        items.sort()
        if [i for i, _ in items] != list(range(len(items))):
            raise DatasetError(f"columns {prefix}0..{prefix}{len(items) - 1} must be contiguous")
        out[prefix] = [pos for _, pos in items]
    if not out:
        raise DatasetError("no feature columns in header")
    return _Header(magic_labels, out, has_label)


def _read_lines(path: str | Path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DatasetError(f"no such file: {path}") from None


def _label_index(raw: str, names: tuple[str, ...] | None, row: int) -> int:
    if names is not None and raw in names:
        return names.index(raw)
    try:
        return int(raw)
    except ValueError:
        raise DatasetError(f"row {row}: unknown label {raw!r}") from None


def _parse_rows(lines: list[str], magic: str, allowed: str, need_label: bool = True):
    if not lines:
        raise DatasetError("empty file")
    names = None
    if lines[0].startswith("#"):
        _, names = _parse_meta(lines[0], magic)
        lines = lines[1:]
    if not lines:
        raise DatasetError("missing header row")
    rows = list(csv.reader(lines))
    header = _parse_header(rows[0], names, allowed, need_label)
    width = len(rows[0])
    ids, labels = [], []
    values = {p: [] for p in header.groups}
    for r, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        if len(row) != width:
            raise DatasetError(f"row {r}: expected {width} fields, got {len(row)}")
        ids.append(row[0])
        if header.has_label:
            labels.append(_label_index(row[1], names, r))
        for p, cols in header.groups.items():
            try:
                vec = [float(row[c]) for c in cols]
            except ValueError as e:
                raise DatasetError(f"row {r} (id {row[0]}): {e}") from None
            if not all(math.isfinite(v) for v in vec):
                raise DatasetError(f"row {r} (id {row[0]}): non-finite value")
            values[p].append(vec)
    arrays = {p: np.array(v, dtype=np.float64).reshape(len(ids), len(header.groups[p]))
              for p, v in values.items()}
    return ids, np.array(labels, dtype=np.int64), arrays, names


def _universe(names, labels: np.ndarray, widths: Iterable[int]) -> LabelUniverse:
    if names is not None:
        C = len(names)
        bad = labels[(labels < 0) | (labels >= C)]
        if len(bad):
            raise DatasetError(f"unknown label index {int(bad[0])}")
        return LabelUniverse(names)
    C = max([int(labels.max()) + 1 if len(labels) else 0, 2, *widths])
    if len(labels) and labels.min() < 0:
        raise DatasetError(f"unknown label index {int(labels.min())}")
    return LabelUniverse.of_size(C)


def load_feature_file(path: str | Path, role: Role | None = None) -> Dataset:
    """Read and validate a feature CSV.

    When logits are present, probabilities are recomputed from them.
    """
    ids, labels, arrays, names = _parse_rows(_read_lines(path), FEATURE_MAGIC, "ezp")
    widths = [arrays[p].shape[1] for p in "zp" if p in arrays]
    universe = _universe(names, labels, widths)
    logits = arrays.get("z")
    probs = softmax(logits) if logits is not None else arrays.get("p")
    ds = Dataset(ids=ids, labels=labels, universe=universe,
                 embeddings=arrays.get("e"), logits=logits, probs=probs, role=role)
    return require_valid(ds)


def dumps_feature_file(ds: Dataset, columns: str = "ezp") -> str:
    buf = _stdio.StringIO()
    buf.write(_meta_line(FEATURE_MAGIC, ds.universe))
    blocks = [(p, a) for p, a in (("e", ds.embeddings), ("z", ds.logits), ("p", ds.probs))
              if a is not None and p in columns]
    header = ["id", "label"] + [f"{p}{j}" for p, a in blocks for j in range(a.shape[1])]
    buf.write(",".join(header) + "\n")
    for i in range(len(ds)):
        cells = [ds.ids[i], str(int(ds.labels[i]))]
        for _, a in blocks:
            cells.extend(fmt(v) for v in a[i])
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def write_feature_file(ds: Dataset, path: str | Path, columns: str = "ezp") -> None:
    Path(path).write_text(dumps_feature_file(ds, columns), encoding="utf-8")


def load_tabular_file(path: str | Path, role: Role | None = None) -> TabularData:
    ids, labels, arrays, names = _parse_rows(_read_lines(path), TABULAR_MAGIC, "x")
    universe = _universe(names, labels, [])
    return TabularData(ids=ids, X=arrays["x"], labels=labels, universe=universe, role=role)


def write_tabular_file(data: TabularData, path: str | Path) -> None:
    lines = [_meta_line(TABULAR_MAGIC, data.universe).rstrip("\n"),
             ",".join(["id", "label"] + [f"x{j}" for j in range(data.X.shape[1])])]
    for i in range(len(data)):
        lines.append(",".join([data.ids[i], str(int(data.labels[i]))]
                              + [fmt(v) for v in data.X[i]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scitos(path: str | Path) -> TabularData:
    """Read the UCI wall-following file: numeric columns then an action name.

    Action names map to label indices in order of first appearance.
    """
    names: list[str] = []
    X, labels = [], []
    for r, row in enumerate(csv.reader(_read_lines(path))):
        if not row or not "".join(row).strip():
            continue
        *vals, name = (c.strip() for c in row)
        try:
            vec = [float(v) for v in vals]
        except ValueError as e:
            raise DatasetError(f"line {r + 1}: {e}") from None
        if X and len(vec) != len(X[0]):
            raise DatasetError(f"line {r + 1}: expected {len(X[0])} values, got {len(vec)}")
        if not all(math.isfinite(v) for v in vec):
            raise DatasetError(f"line {r + 1}: non-finite value")
        if name not in names:
            names.append(name)
        X.append(vec)
        labels.append(names.index(name))
    if not X:
        raise DatasetError(f"{path}: no data rows")
    return TabularData(ids=[str(i) for i in range(len(X))], X=np.array(X),
                       labels=np.array(labels), universe=LabelUniverse(tuple(names)))


# -- splits ----------------------------------------------------------------


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.10
    train_fraction_of_rest: float = 0.80
    calib_share_of_holdout: float = 0.50
    seed: int = 0
    share_calibration_validation: bool = False

    def __post_init__(self) -> None:
        for name in ("test_fraction", "train_fraction_of_rest", "calib_share_of_holdout"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


class Splits(NamedTuple):
    train: Dataset | TabularData
    calib: Dataset | TabularData
    validation: Dataset | TabularData
    test: Dataset | TabularData


_D = TypeVar("_D", Dataset, TabularData)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(labels: np.ndarray, cfg: SplitConfig) -> tuple[np.ndarray, ...]:
    """Stratified, seeded partition into train/calib/validation/test positions."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    parts: list[list[np.ndarray]] = [[], [], [], []]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        n = len(members)
        if n < 4:
            raise DatasetError(f"class {int(c)} has {n} examples; at least 4 are needed")
        members = members[rng.permutation(n)]
        n_test = min(n - 3, max(1, _round_half_up(n * cfg.test_fraction)))
        rest = n - n_test
        n_hold = min(rest - 1, max(2, _round_half_up(rest * (1 - cfg.train_fraction_of_rest))))
        n_train = rest - n_hold
        n_cal = min(n_hold - 1, max(1, _round_half_up(n_hold * cfg.calib_share_of_holdout)))
        cuts = np.cumsum([n_train, n_cal, n_hold - n_cal])
        for part, chunk in zip(parts, np.split(members, cuts)):
            part.append(chunk)
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split(ds: _D, cfg: SplitConfig = SplitConfig()) -> Splits:
    tr, ca, va, te = split_indices(ds.labels, cfg)
    if cfg.share_calibration_validation:
        ca = va = np.sort(np.concatenate([ca, va]))
    return Splits(ds.subset(tr, Role.TRAIN), ds.subset(ca, Role.CALIBRATION),
                  ds.subset(va, Role.VALIDATION), ds.subset(te, Role.TEST))


# -- binary artifacts ----------------------------------------------------------


def _pack_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        code, data = b"f", a.astype("<f8")
    elif a.dtype.kind in "iub":
        code, data = b"i", a.astype("<i8")
    else:
        raise TypeError(f"cannot store dtype {a.dtype}")
    head = code + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + data.tobytes(order="C")


def _unpack_array(b: bytes) -> np.ndarray:
    try:
        code = b[:1]
        (ndim,) = struct.unpack_from("<B", b, 1)
        shape = struct.unpack_from(f"<{ndim}Q", b, 2)
    except struct.error:
        raise ArtifactError("truncated array header") from None
    dtype = {b"f": "<f8", b"i": "<i8"}.get(code)
    if dtype is None:
        raise ArtifactError(f"unknown array type {code!r}")
    off = 2 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(b) - off != 8 * count:
        raise ArtifactError("array payload has the wrong length")
    a = np.frombuffer(b, dtype=dtype, count=count, offset=off).reshape(shape)
    return a.astype(np.float64 if code == b"f" else np.int64)


def _write_container(path: str | Path, kind: int, sections: dict[str, bytes]) -> None:
    out = bytearray(ARTIFACT_MAGIC)
    out += struct.pack("<HHI", FORMAT_VERSION, kind, len(sections))
    for name, payload in sections.items():
        nb = name.encode("ascii")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<I", zlib.crc32(out))
    Path(path).write_bytes(bytes(out))


def _read_container(path: str | Path, kind: int) -> dict[str, bytes]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ArtifactError(f"no such file: {path}") from None
    if raw[:8] != ARTIFACT_MAGIC:
        raise ArtifactError(f"{path}: not an artifact file (bad magic bytes)")
    if len(raw) < 20:
        raise ArtifactError(f"{path}: truncated file")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise ArtifactError(f"{path}: checksum mismatch (truncated or corrupted file)")
    version, got_kind, n = struct.unpack_from("<HHI", raw, 8)
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported artifact version {version}")
    if got_kind != kind:
        raise ArtifactError(f"{path}: artifact kind {got_kind}, expected {kind}")
    off, end, sections = 16, len(raw) - 4, {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2:off + 2 + ln].decode("ascii")
            off += 2 + ln
            (size,) = struct.unpack_from("<Q", raw, off)
            off += 8
            if off + size > end:
                raise ArtifactError(f"{path}: section {name!r} runs past end of file")
            sections[name] = raw[off:off + size]
            off += size
    except struct.error:
        raise ArtifactError(f"{path}: truncated section table") from None
    if off != end:
        raise ArtifactError(f"{path}: trailing bytes after last section")
    return sections


def _meta(sections: dict[str, bytes]) -> dict:
    if "meta" not in sections:
        raise ArtifactError("artifact has no meta section")
    return json.loads(sections["meta"].decode("utf-8"))


def _array(sections: dict[str, bytes], name: str) -> np.ndarray:
    if name not in sections:
        raise ArtifactError(f"artifact is missing section {name!r}")
    return _unpack_array(sections[name])


def save_monitor(m: CalibratedMonitor, path: str | Path) -> None:
    fn = m.fn
    meta = {"kind": fn.kind.value, "n_classes": fn.n_classes, "k": fn.k,
            "inclusion": m.inclusion.value, "labels": list(m.universe.names)}
    sections = {"meta": json.dumps(meta, sort_keys=True).encode("utf-8"),
                "scores": _pack_array(m.calib_scores)}
    if fn.temperature is not None:
        sections["temperature"] = _pack_array(np.array([fn.temperature]))
    if fn.centroids is not None:
        sections["centroids"] = _pack_array(fn.centroids)
    if fn.index is not None:
        sections["index.points"] = _pack_array(fn.index.points)
        sections["index.labels"] = _pack_array(fn.index.labels)
        for name, a in vars(fn.index.tree).items():
            sections[f"index.tree.{name}"] = _pack_array(a)
    _write_container(path, KIND_MONITOR, sections)


def load_monitor(path: str | Path) -> CalibratedMonitor:
    s = _read_container(path, KIND_MONITOR)
    meta = _meta(s)
    try:
        kind = Kind(meta["kind"])
        index = None
        if kind.uses_index:
            tree = TreeArrays(**{f: _array(s, f"index.tree.{f}")
                                 for f in TreeArrays.__dataclass_fields__})
            index = NeighborIndex(_array(s, "index.points"), _array(s, "index.labels"), tree)
        fn = NonconformityFunction(
            kind, int(meta["n_classes"]), k=meta.get("k"),
            temperature=float(_array(s, "temperature")[0]) if kind.temperature_scaled else None,
            centroids=_array(s, "centroids") if kind is Kind.CENTROID else None,
            index=index,
        )
        return CalibratedMonitor(fn, _array(s, "scores"), LabelUniverse(tuple(meta["labels"])),
                                 Inclusion(meta["inclusion"]))
    except (KeyError, ValueError, TypeError) as e:
        raise ArtifactError(f"{path}: inconsistent artifact: {e}") from None


def save_model(m: MlpModel, path: str | Path) -> None:
    meta = {"labels": list(m.universe.names), "hidden": m.hidden}
    sections = {"meta": json.dumps(meta, sort_keys=True).encode("utf-8")}
    for name in ("W1", "b1", "W2", "b2", "x_mean", "x_scale"):
        sections[name] = _pack_array(getattr(m, name))
    _write_container(path, KIND_MODEL, sections)


def load_model(path: str | Path) -> MlpModel:
    s = _read_container(path, KIND_MODEL)
    meta = _meta(s)
    try:
        return MlpModel(*(_array(s, n) for n in ("W1", "b1", "W2", "b2", "x_mean", "x_scale")),
                        universe=LabelUniverse(tuple(meta["labels"])))
    except (KeyError, ValueError) as e:
        raise ArtifactError(f"{path}: inconsistent model artifact: {e}") from None


# -- unlabeled inputs and streamed rows ----------------------------------------


class FeatureRowParser:
    """Turns CSV rows into :class:`Features` given the header columns."""

    def __init__(self, header: list[str], labels: tuple[str, ...] | None = None):
        self.header = _parse_header(header, labels, "ezp", need_label=False)
        self.width = len(header)
        self.labels = labels

    @classmethod
    def for_function(cls, fn: NonconformityFunction) -> FeatureRowParser:
        """Default layout when a stream has no header row."""
        if fn.kind.uses_embedding:
            prefix, width = "e", fn.embedding_dim
        elif fn.kind.temperature_scaled:
            prefix, width = "z", fn.n_classes
        else:
            prefix, width = "p", fn.n_classes
        return cls(["id"] + [f"{prefix}{j}" for j in range(width)])

    def parse(self, row: list[str]) -> tuple[str, int | None, Features]:
        if len(row) != self.width:
            raise DatasetError(f"expected {self.width} fields, got {len(row)}")
        label = _label_index(row[1], self.labels, 0) if self.header.has_label else None
        vecs = {}
        for p, cols in self.header.groups.items():
            try:
                v = np.array([float(row[c]) for c in cols])
            except ValueError as e:
                raise DatasetError(f"id {row[0]}: {e}") from None
            if not np.isfinite(v).all():
                raise DatasetError(f"id {row[0]}: non-finite value")
            vecs[p] = v
        logits = vecs.get("z")
        probs = softmax(logits) if logits is not None else vecs.get("p")
        return row[0], label, Features(embedding=vecs.get("e"), logits=logits, probs=probs)


def load_inputs(path: str | Path) -> tuple[list[str], list[Features]]:
    """Read a feature CSV whose label column is optional."""
    lines = _read_lines(path)
    names = None
    if lines and lines[0].startswith("#"):
        _, names = _parse_meta(lines[0], FEATURE_MAGIC)
        lines = lines[1:]
    if not lines:
        raise DatasetError(f"{path}: missing header row")
    rows = list(csv.reader(lines))
    parser = FeatureRowParser(rows[0], names)
    ids, feats = [], []
    for r, row in enumerate(rows[1:], start=1):
        if not row:
            continue
        try:
            i, _, f = parser.parse(row)
        except DatasetError as e:
            raise DatasetError(f"row {r}: {e}") from None
        ids.append(i)
        feats.append(f)
    return ids, feats


# -- evaluation reports ----------------------------------------------------------


def write_report(report: EvaluationReport, out_dir: str | Path,
                 curve: list[CurvePoint] | None = None) -> list[Path]:
    """Write per-epsilon table, cumulative curves, optional calibration curve and JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    rows = ["epsilon,error_rate,multiple_rate,empty_rate,single_rate,n"]
    for r in report.rows:
        rows.append(",".join([fmt(r.epsilon), fmt(r.error_rate), fmt(r.multiple_rate),
                              fmt(r.empty_rate), fmt(r.single_rate), str(r.n)]))
    written.append(out / "per_epsilon.csv")
    written[-1].write_text("\n".join(rows) + "\n", encoding="utf-8")

    eps = list(report.cumulative_errors)
    lines = ["index," + ",".join(f"errors@{fmt(e)}" for e in eps)]
    n = len(next(iter(report.cumulative_errors.values()), ()))
    for i in range(n):
        lines.append(",".join([str(i + 1)] + [str(report.cumulative_errors[e][i]) for e in eps]))
    written.append(out / "cumulative_errors.csv")
    written[-1].write_text("\n".join(lines) + "\n", encoding="utf-8")

    if curve is not None:
        lines = ["epsilon,error_rate,multiple_rate,empty_rate"]
        lines += [",".join(fmt(v) for v in (c.epsilon, c.error_rate, c.multiple_rate,
                                              c.empty_rate)) for c in curve]
        written.append(out / "calibration_curve.csv")
        written[-1].write_text("\n".join(lines) + "\n", encoding="utf-8")

    written.append(out / "summary.json")
    written[-1].write_text(report.to_json() + "\n", encoding="utf-8")
    return written


def read_report(path: str | Path) -> EvaluationReport:
    return EvaluationReport.from_json(Path(path).read_text(encoding="utf-8"))
