"""Tabular datasets: CSV ingestion, [0, 1] scaling, stratified splits, class balancing."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

NORMALIZER_FORMAT = "vqaug-normalizer"
NORMALIZER_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Schema:
    feature_names: tuple[str, ...]
    label_name: str
    class_names: tuple[str, ...]
    integer_features: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "integer_features", tuple(self.integer_features))
        if len(self.feature_names) < 1:
            raise DataError("schema needs at least one feature")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")
        if self.label_name in self.feature_names:
            raise DataError(f"label column {self.label_name!r} clashes with a feature name")
        if len(self.class_names) < 2:
            raise DataError("schema needs at least two classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("class names must be unique")
        unknown = set(self.integer_features) - set(self.feature_names)
        if unknown:
            raise DataError(f"integer_features not in feature_names: {sorted(unknown)}")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "label_name": self.label_name,
            "class_names": list(self.class_names),
            "integer_features": list(self.integer_features),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Schema:
        return cls(
            feature_names=tuple(d["feature_names"]),
            label_name=d["label_name"],
            class_names=tuple(d["class_names"]),
            integer_features=tuple(d.get("integer_features", ())),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    schema: Schema

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[1] != self.schema.n_features:
            raise DataError(
                f"features have {x.shape[1]} columns, schema has {self.schema.n_features}"
            )
        if y.shape != (x.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        if y.size and (y.min() < 0 or y.max() >= self.schema.n_classes):
            raise DataError("label outside [0, n_classes)")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.schema.n_classes)
        return {c: int(counts[c]) for c in range(self.schema.n_classes)}

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return Dataset(self.features[index], self.labels[index], self.schema)

    def is_normalized(self) -> bool:
        return bool(np.all((self.features >= 0.0) & (self.features <= 1.0)))


def concat(first: Dataset, *rest: Dataset) -> Dataset:
    for d in rest:
        if d.schema != first.schema:
            raise DataError("cannot concatenate datasets with different schemas")
    parts = (first, *rest)
    return Dataset(
        np.concatenate([d.features for d in parts], axis=0),
        np.concatenate([d.labels for d in parts]),
        first.schema,
    )


def ingest_csv(path: str | Path, schema: Schema) -> Dataset:
    """Read a headed CSV whose columns are the schema features followed by the label."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        expected = [*schema.feature_names, schema.label_name]
        missing = [c for c in expected if c not in header]
        if missing:
            raise DataError(f"{path}: line 1: missing column(s) {missing}")
        cols = [header.index(c) for c in schema.feature_names]
        label_col = header.index(schema.label_name)
        class_index = {name: i for i, name in enumerate(schema.class_names)}
        rows: list[list[float]] = []
        labels: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: line {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            values = []
            for name, c in zip(schema.feature_names, cols):
                cell = row[c].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}: line {line_no}, column {name!r}: cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise DataError(
                        f"{path}: line {line_no}, column {name!r}: non-finite value {cell!r}"
                    )
                values.append(v)
            raw_label = row[label_col].strip()
            if raw_label not in class_index:
                raise DataError(
                    f"{path}: line {line_no}, column {schema.label_name!r}: "
                    f"unknown class label {raw_label!r}"
                )
            rows.append(values)
            labels.append(class_index[raw_label])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), schema)


def _format_value(v: float) -> str:
    return repr(float(v))


def write_csv(data: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    schema = data.schema
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*schema.feature_names, schema.label_name])
        for x, y in zip(data.features, data.labels):
            w.writerow([*(_format_value(v) for v in x), schema.class_names[y]])


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-feature min/max fitted on training rows."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        lo = np.array(self.mins, dtype=np.float64)
        hi = np.array(self.maxs, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DataError("mins and maxs must be 1-D arrays of equal length")
        if np.any(hi < lo):
            raise DataError("max < min for some feature")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "mins", lo)
        object.__setattr__(self, "maxs", hi)

    @property
    def n_features(self) -> int:
        return self.mins.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {x.shape[-1]}")
        span = self.maxs - self.mins
        constant = span == 0
        out = (x - self.mins) / np.where(constant, 1.0, span)
        out = np.where(constant, 0.0, out)
        return np.clip(out, 0.0, 1.0)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {z.shape[-1]}")
        return self.mins + z * (self.maxs - self.mins)

    def to_dict(self) -> dict:
        return {
            "format": NORMALIZER_FORMAT,
            "version": NORMALIZER_VERSION,
            "min": [float(v) for v in self.mins],
            "max": [float(v) for v in self.maxs],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Normalizer:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("format") != NORMALIZER_FORMAT:
            raise DataError(f"{path}: not a normalizer file")
        if d.get("version") != NORMALIZER_VERSION:
            raise DataError(f"{path}: unsupported normalizer version {d.get('version')}")
        return cls(np.array(d["min"]), np.array(d["max"]))


def fit_normalizer(train: Dataset) -> Normalizer:
    if train.n_samples < 1:
        raise DataError("cannot fit a normalizer on an empty dataset")
    return Normalizer(train.features.min(axis=0), train.features.max(axis=0))


def apply_normalizer(norm: Normalizer, data: Dataset) -> Dataset:
    """Map each value to (v - min) / (max - min), clamped to [0, 1]; constant features map to 0."""
    if data.schema.n_features != norm.n_features:
        raise DataError(
            f"normalizer has {norm.n_features} features, dataset has {data.schema.n_features}"
        )
    return Dataset(norm.transform(data.features), data.labels, data.schema)


def denormalize(norm: Normalizer, data: Dataset) -> Dataset:
    """Back to the original units; schema-flagged integer features are rounded."""
    x = norm.inverse(data.features)
    for name in data.schema.integer_features:
        j = data.schema.feature_names.index(name)
        x[:, j] = np.round(x[:, j])
    return Dataset(x, data.labels, data.schema)


@dataclass(frozen=True)
class BalancePlan:
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, c: int) -> int:
        return self.counts.get(c, 0)


def plan_balance(class_counts: Mapping) -> BalancePlan:
    """Synthetic rows needed per class so every class reaches the largest class size."""
    if not class_counts:
        raise DataError("no classes to balance")
    for c, n in class_counts.items():
        if n < 1:
            raise DataError(f"class {c!r} has count {n}; every class needs at least one row")
    largest = max(class_counts.values())
    return BalancePlan({c: int(largest - n) for c, n in class_counts.items()})


def _per_class_index(labels: np.ndarray, n_classes: int) -> list[np.ndarray]:
    return [np.flatnonzero(labels == c) for c in range(n_classes)]


def stratified_split(
    data: Dataset, fractions: float | Sequence[float], seed: int
) -> tuple[Dataset, Dataset]:
    """Split into two parts, preserving class proportions within one row per class."""
    if isinstance(fractions, (int, float)):
        first = float(fractions)
        fr = (first, 1.0 - first)
    else:
        fr = tuple(float(f) for f in fractions)
    if len(fr) != 2 or not math.isclose(sum(fr), 1.0, abs_tol=1e-9) or min(fr) <= 0:
        raise DataError(f"fractions must be two positive values summing to 1, got {fr}")
    rng = stream(seed, "data", "stratified_split")
    a_idx: list[np.ndarray] = []
    b_idx: list[np.ndarray] = []
    for c, idx in enumerate(_per_class_index(data.labels, data.schema.n_classes)):
        n = idx.size
        if n == 0:
            continue
        if n < 2:
            raise DataError(
                f"class {data.schema.class_names[c]!r} has {n} sample(s); need at least 2 to split"
            )
        k = int(math.floor(n * fr[0] + 0.5))
        k = min(max(k, 1), n - 1)
        perm = rng.permutation(idx)
        a_idx.append(perm[:k])
        b_idx.append(perm[k:])
    a = np.sort(np.concatenate(a_idx))
    b = np.sort(np.concatenate(b_idx))
    return data.subset(a), data.subset(b)


def proportional_quota(counts: Sequence[int], cap: int) -> list[int]:
    """Largest-remainder allocation of ``cap`` rows in proportion to ``counts``.

    Every non-empty class keeps at least one row.
    """
    total = sum(counts)
    raw = [cap * n / total for n in counts]
    quota = [min(n, max(1 if n else 0, int(math.floor(r)))) for n, r in zip(counts, raw)]
    left = cap - sum(quota)
    order = sorted(range(len(counts)), key=lambda i: (-(raw[i] - math.floor(raw[i])), i))
    while left > 0:
        progressed = False
        for i in order:
            if left == 0:
                break
            if quota[i] < counts[i]:
                quota[i] += 1
                left -= 1
                progressed = True
        if not progressed:
            break
    while left < 0:
        # only reachable when the one-row floor overshoots; trim the largest classes
        i = max(range(len(quota)), key=lambda j: (quota[j], -j))
        quota[i] -= 1
        left += 1
    return quota


def stratified_subsample(data: Dataset, cap: int, seed: int) -> Dataset:
    """At most ``cap`` rows with class proportions preserved within one row."""
    present = [c for c, n in data.class_counts().items() if n > 0]
    if cap < len(present):
        raise DataError(f"cap {cap} is smaller than the number of classes {len(present)}")
    if data.n_samples <= cap:
        return data
    rng = stream(seed, "data", "stratified_subsample")
    groups = _per_class_index(data.labels, data.schema.n_classes)
    quota = proportional_quota([g.size for g in groups], cap)
    keep = [rng.permutation(g)[:q] for g, q in zip(groups, quota)]
    return data.subset(np.sort(np.concatenate(keep)))
