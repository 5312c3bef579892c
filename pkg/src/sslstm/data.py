"""Recordings, datasets, CSV ingestion and preprocessing.

CSV layout: UTF-8 with a header row; an optional ``timestamp`` column,
feature columns ``f0 .. f{D-1}`` and a ``label`` column holding either an
integer class id or a class name. One file per (subject, run), named
``subject<S>_run<R>.csv``. A JSON manifest ties the files together.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

_FILE_RE = re.compile(r"subject(?P<subject>[^_]+)_run(?P<run>[^.]+)\.csv$")
_MISSING = {"", "nan", "NaN", "NA", "null"}


@dataclass
class Recording:
    id: str
    subject: str
    run: str
    features: np.ndarray  # (T, D)
    labels: np.ndarray  # (T,) int64, 0-based class ids
    sample_rate: float
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"{self.id}: features must be (T, D), got {self.features.shape}")
        if len(self.labels) != len(self.features) or len(self.labels) < 1:
            raise DataError(f"{self.id}: {len(self.features)} feature rows but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    def equals(self, other: "Recording") -> bool:
        return (
            (self.id, self.subject, self.run, self.sample_rate) == (other.id, other.subject, other.run, other.sample_rate)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class Dataset:
    recordings: list[Recording]
    class_names: list[str]
    null_class: int | None = 0
    sample_rate: float = 30.0

    def __post_init__(self):
        c = len(self.class_names)
        for r in self.recordings:
            if r.sample_rate != self.sample_rate:
                raise DataError(f"{r.id}: sample rate {r.sample_rate} != dataset rate {self.sample_rate}")
            if len(r.labels) and (r.labels.min() < 0 or r.labels.max() >= c):
                raise DataError(f"{r.id}: labels outside [0, {c})")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_channels(self) -> int:
        return self.recordings[0].n_channels


# ---------------------------------------------------------------------------
# CSV


@dataclass
class CsvSchema:
    """Which columns hold what. ``feature_columns=None`` takes every ``f<k>``."""

    label_column: str = "label"
    feature_columns: list[str] | None = None
    timestamp_column: str | None = "timestamp"
    class_names: list[str] | None = None


def parse_recording_name(path: str | Path) -> tuple[str, str]:
    m = _FILE_RE.search(Path(path).name)
    if not m:
        return Path(path).stem, "1"
    return m.group("subject"), m.group("run")


def _parse_label(token: str, names: dict[str, int], n_classes: int | None, row: int) -> int:
    token = token.strip()
    if token in names:
        return names[token]
    try:
        value = int(token)
    except ValueError:
        raise DataError(f"row {row}: unknown class label {token!r}") from None
    if value < 0 or (n_classes is not None and value >= n_classes):
        raise DataError(f"row {row}: class id {value} out of range")
    return value


def load_csv(
    path: str | Path,
    schema: CsvSchema | None = None,
    sample_rate: float = 30.0,
    subject: str | None = None,
    run: str | None = None,
) -> Recording:
    """Read one recording. Missing feature cells become NaN for :func:`impute`.

    Row numbers in errors count data rows from 1 (the header is not counted).
    """
    schema = schema or CsvSchema()
    path = Path(path)
    names = {n: i for i, n in enumerate(schema.class_names or [])}
    n_classes = len(schema.class_names) if schema.class_names else None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise DataError(f"{path}: no {schema.label_column!r} column")
        if schema.feature_columns is None:
            fcols = [h for h in header if re.fullmatch(r"f\d+", h)]
            fcols.sort(key=lambda h: int(h[1:]))
        else:
            fcols = list(schema.feature_columns)
        missing = [c for c in fcols if c not in header]
        if missing or not fcols:
            raise DataError(f"{path}: missing feature columns {missing or 'f0..'}")
        fidx = [header.index(c) for c in fcols]
        lidx = header.index(schema.label_column)
        tidx = header.index(schema.timestamp_column) if schema.timestamp_column in header else None

        feats, labels, stamps = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(row)} fields, header has {len(header)}")
            values = []
            for i in fidx:
                cell = row[i].strip()
                if cell in _MISSING:
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {row_no}: bad feature value {cell!r}") from None
            feats.append(values)
            labels.append(_parse_label(row[lidx], names, n_classes, row_no))
            if tidx is not None:
                stamps.append(float(row[tidx]))
    if not labels:
        raise DataError(f"{path}: no data rows")
    s, r = parse_recording_name(path)
    subject = subject if subject is not None else s
    run = run if run is not None else r
    return Recording(
        id=f"subject{subject}_run{run}",
        subject=subject,
        run=run,
        features=np.array(feats, dtype=np.float64),
        labels=np.array(labels, dtype=np.int64),
        sample_rate=float(sample_rate),
        timestamps=np.array(stamps) if tidx is not None else None,
    )


def write_csv(rec: Recording, path: str | Path) -> None:
    """Write ``rec``; floats use ``repr`` so they parse back bit-exactly."""
    path = Path(path)
    d = rec.n_channels
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [f"f{k}" for k in range(d)] + ["label"]
        if rec.timestamps is not None:
            cols = ["timestamp"] + cols
        w.writerow(cols)
        for t in range(len(rec)):
            row = ["" if math.isnan(v) else repr(float(v)) for v in rec.features[t]]
            row.append(str(int(rec.labels[t])))
            if rec.timestamps is not None:
                row.insert(0, repr(float(rec.timestamps[t])))
            w.writerow(row)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(ds: Dataset, out_dir: str | Path, manifest_name: str = "manifest.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in ds.recordings:
        fname = f"subject{rec.subject}_run{rec.run}.csv"
        write_csv(rec, out / fname)
        entries.append({"path": fname, "subject": rec.subject, "run": rec.run})
    manifest = {
        "class_names": ds.class_names,
        "null_class": ds.null_class,
        "sample_rate": ds.sample_rate,
        "recordings": entries,
    }
    path = out / manifest_name
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from None
    for key in ("class_names", "sample_rate", "recordings"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: manifest lacks {key!r}")
    schema = CsvSchema(class_names=list(manifest["class_names"]), feature_columns=manifest.get("feature_columns"))
    rate = float(manifest["sample_rate"])
    recs = []
    for entry in manifest["recordings"]:
        p = manifest_path.parent / entry["path"]
        if not p.exists():
            raise DataError(f"recording file not found: {p}")
        recs.append(load_csv(p, schema, rate, str(entry.get("subject", "")) or None, str(entry.get("run", "")) or None))
    return Dataset(recs, list(manifest["class_names"]), manifest.get("null_class", 0), rate)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class NormStats:
    mean: np.ndarray
    sd: np.ndarray


def fit_normalizer(recordings: Sequence[Recording]) -> NormStats:
    """Per-channel mean and standard deviation over the (training) recordings, ignoring NaNs."""
    x = np.concatenate([r.features for r in recordings], axis=0)
    counts = np.sum(~np.isnan(x), axis=0)
    mean = np.where(counts > 0, np.nansum(x, axis=0) / np.maximum(counts, 1), 0.0)
    sq = np.nansum((x - mean) ** 2, axis=0)
    sd = np.sqrt(np.where(counts > 0, sq / np.maximum(counts, 1), 0.0))
    return NormStats(mean, sd)


def impute(features: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Forward-fill NaNs along time; leading NaNs take ``fill`` (channel means)."""
    x = np.array(features, dtype=np.float64, copy=True)
    for k in range(x.shape[1]):
        col = x[:, k]
        bad = np.isnan(col)
        if not bad.any():
            continue
        idx = np.where(~bad, np.arange(len(col)), -1)
        np.maximum.accumulate(idx, out=idx)
        filled = np.where(idx >= 0, col[np.maximum(idx, 0)], fill[k])
        x[:, k] = filled
    return x


def apply_normalizer(rec: Recording, stats: NormStats) -> Recording:
    """Impute then z-score; near-constant channels (sd < 1e-12) are only centered."""
    x = impute(rec.features, stats.mean) - stats.mean
    scale = np.where(stats.sd < 1e-12, 1.0, stats.sd)
    return replace(rec, features=x / scale)


def decimate(rec: Recording, factor: int) -> Recording:
    """Keep every ``factor``-th sample starting at index 0."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"decimation factor must be a positive integer, got {factor}")
    factor = int(factor)
    return replace(
        rec,
        features=rec.features[::factor].copy(),
        labels=rec.labels[::factor].copy(),
        sample_rate=rec.sample_rate / factor,
        timestamps=None if rec.timestamps is None else rec.timestamps[::factor].copy(),
    )


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class Selector:
    subject: str
    run: str | None = None  # None selects every run of the subject

    def matches(self, rec: Recording) -> bool:
        return rec.subject == self.subject and (self.run is None or rec.run == self.run)

    @classmethod
    def parse(cls, item) -> "Selector":
        if isinstance(item, Selector):
            return item
        if isinstance(item, dict):
            return cls(str(item["subject"]), None if item.get("run") in (None, "*") else str(item["run"]))
        subject, run = item
        return cls(str(subject), None if run in (None, "*") else str(run))

    def to_json(self) -> dict:
        return {"subject": self.subject, "run": self.run if self.run is not None else "*"}


@dataclass
class SplitSpec:
    """Train/validation/test selectors. ``train=None`` means every remaining recording."""

    validation: list[Selector]
    test: list[Selector] = field(default_factory=list)
    train: list[Selector] | None = None
    exclude_subjects: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validation = [Selector.parse(s) for s in self.validation]
        self.test = [Selector.parse(s) for s in self.test]
        if self.train is not None:
            self.train = [Selector.parse(s) for s in self.train]
        self.exclude_subjects = [str(s) for s in self.exclude_subjects]
        groups = [set(self.validation), set(self.test), set(self.train or [])]
        for a in range(3):
            for b in range(a + 1, 3):
                if groups[a] & groups[b]:
                    raise ConfigError(f"split selector sets overlap: {groups[a] & groups[b]}")

    def resolve(self, recordings: Iterable[Recording]) -> tuple[list[Recording], list[Recording], list[Recording]]:
        recs = [r for r in recordings if r.subject not in self.exclude_subjects]
        val = [r for r in recs if any(s.matches(r) for s in self.validation)]
        test = [r for r in recs if any(s.matches(r) for s in self.test)]
        taken = {id(r) for r in val} | {id(r) for r in test}
        if {id(r) for r in val} & {id(r) for r in test}:
            raise ConfigError("a recording is selected for both validation and test")
        if self.train is None:
            train = [r for r in recs if id(r) not in taken]
        else:
            train = [r for r in recs if any(s.matches(r) for s in self.train)]
            if {id(r) for r in train} & taken:
                raise ConfigError("a training recording is also selected for validation/test")
        return train, val, test

    def to_json(self) -> dict:
        return {
            "train": None if self.train is None else [s.to_json() for s in self.train],
            "validation": [s.to_json() for s in self.validation],
            "test": [s.to_json() for s in self.test],
            "exclude_subjects": self.exclude_subjects,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        if "protocol" in obj:
            return HOLDOUT_PROTOCOLS[obj["protocol"]]
        return cls(
            validation=obj.get("validation", []),
            test=obj.get("test", []),
            train=obj.get("train"),
            exclude_subjects=obj.get("exclude_subjects", []),
        )


# Hold-out protocols of the benchmark datasets; training takes everything else.
HOLDOUT_PROTOCOLS: dict[str, SplitSpec] = {
    "opp": SplitSpec(validation=[("1", "2")], test=[("2", "4"), ("2", "5"), ("3", "4"), ("3", "5")]),
    "dg": SplitSpec(validation=[("9", "1")], test=[("2", "1"), ("2", "2")], exclude_subjects=["4", "10"]),
    "pamap2": SplitSpec(validation=[("5", "1"), ("5", "2")], test=[("6", "1"), ("6", "2")]),
}


def loso_splits(recordings: Sequence[Recording], exclude_subjects: Sequence[str] = ()) -> list[tuple[str, SplitSpec]]:
    """Leave-one-subject-out folds; each fold validates on the next subject in sorted order."""
    subjects = sorted({r.subject for r in recordings if r.subject not in exclude_subjects}, key=_natural_key)
    if len(subjects) < 3:
        raise ConfigError("leave-one-subject-out needs at least three subjects")
    folds = []
    for i, s in enumerate(subjects):
        val = subjects[(i + 1) % len(subjects)]
        folds.append((s, SplitSpec(validation=[(val, None)], test=[(s, None)], exclude_subjects=list(exclude_subjects))))
    return folds


def _natural_key(s: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]
