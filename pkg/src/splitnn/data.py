"""Tabular datasets with explicit missingness.

Files are delimiter-separated text; a schema declares one role per column
(numeric feature, binary-categorical feature, label, or ignore) together
with the tokens that mark a missing cell. Missing feature cells are kept
as NaN behind a boolean mask (True = observed); rows with a missing label
are dropped. All containers here are frozen after construction and every
operation is a pure function, so they are safe to share across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDatasetError,
    MalformedDataError,
    SchemaError,
    ShapeMismatchError,
)
from . import seeding

CLASSIFICATION = "classification"
REGRESSION = "regression"

ROLE_NUMERIC = "numeric"
ROLE_BINARY = "binary"
ROLE_LABEL = "label"
ROLE_IGNORE = "ignore"

DEFAULT_MISSING_MARKERS = frozenset({"?", "NA", ""})

# schema token for the empty string (it cannot be written literally)
_EMPTY_KEYWORD = "empty"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str
    extra_missing: frozenset = frozenset()


@dataclass(frozen=True)
class Schema:
    """Column roles plus parsing options for one dataset file."""

    task: str
    columns: tuple
    delimiter: str = ","
    has_header: bool = False
    missing_markers: frozenset = DEFAULT_MISSING_MARKERS

    def feature_columns(self):
        return [c for c in self.columns if c.role in (ROLE_NUMERIC, ROLE_BINARY)]

    def label_index(self):
        idx = [i for i, c in enumerate(self.columns) if c.role == ROLE_LABEL]
        if len(idx) != 1:
            raise SchemaError(f"schema must declare exactly one label column, found {len(idx)}")
        return idx[0]


def parse_schema(path) -> Schema:
    """Parse a schema file.

    Format: '#' comments; directive lines ``@task``, ``@delimiter``,
    ``@header``, ``@missing`` (whitespace-separated tokens, the keyword
    ``empty`` standing for the empty string); one ``column <name> <role>
    [missing=tok,tok]`` line per file column, in file order.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"schema file not found: {path}")
    task = None
    delimiter = ","
    has_header = False
    markers = None
    columns = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "@task":
            if len(parts) != 2 or parts[1] not in (CLASSIFICATION, REGRESSION):
                raise SchemaError(f"{path}:{lineno}: @task must be classification or regression")
            task = parts[1]
        elif parts[0] == "@delimiter":
            delimiter = raw.split(None, 1)[1].strip()
            if delimiter == "comma":
                delimiter = ","
            elif delimiter == "semicolon":
                delimiter = ";"
            elif delimiter == "tab":
                delimiter = "\t"
        elif parts[0] == "@header":
            if len(parts) != 2 or parts[1] not in ("yes", "no"):
                raise SchemaError(f"{path}:{lineno}: @header must be yes or no")
            has_header = parts[1] == "yes"
        elif parts[0] == "@missing":
            markers = frozenset("" if t == _EMPTY_KEYWORD else t for t in parts[1:])
        elif parts[0] == "column":
            if len(parts) < 3:
                raise SchemaError(f"{path}:{lineno}: column line needs a name and a role")
            name, role = parts[1], parts[2]
            if role not in (ROLE_NUMERIC, ROLE_BINARY, ROLE_LABEL, ROLE_IGNORE):
                raise SchemaError(f"{path}:{lineno}: unknown column role {role!r}")
            extra = frozenset()
            for opt in parts[3:]:
                if opt.startswith("missing="):
                    extra = frozenset(
                        "" if t == _EMPTY_KEYWORD else t for t in opt[len("missing="):].split(",")
                    )
                else:
                    raise SchemaError(f"{path}:{lineno}: unknown column option {opt!r}")
            columns.append(ColumnSpec(name, role, extra))
        else:
            raise SchemaError(f"{path}:{lineno}: unrecognized schema line {line!r}")
    if task is None:
        raise SchemaError(f"{path}: missing @task directive")
    if not columns:
        raise SchemaError(f"{path}: schema declares no columns")
    schema = Schema(
        task=task,
        columns=tuple(columns),
        delimiter=delimiter,
        has_header=has_header,
        missing_markers=markers if markers is not None else DEFAULT_MISSING_MARKERS,
    )
    schema.label_index()
    if len(schema.feature_columns()) < 2:
        raise SchemaError(f"{path}: at least 2 feature columns required")
    return schema


@dataclass(frozen=True)
class Dataset:
    """Column-typed tabular data with an explicit missingness mask.

    ``features`` holds NaN wherever ``mask`` is False; a cell's value is
    meaningful only where the mask is True. Labels are class indices
    (classification) or real targets (regression).
    """

    name: str
    features: np.ndarray  # N x d, float64, NaN at unobserved cells
    mask: np.ndarray  # N x d, bool, True = observed
    labels: np.ndarray  # N, int64 or float64
    feature_names: tuple
    task: str
    num_classes: int = 0
    label_names: tuple = ()

    def __post_init__(self):
        if self.features.shape != self.mask.shape:
            raise ShapeMismatchError("features and mask must have identical shape")
        n, d = self.features.shape
        if n < 1 or d < 2:
            raise EmptyDatasetError(f"dataset needs N >= 1 and d >= 2, got {n} x {d}")
        if len(self.labels) != n or len(self.feature_names) != d:
            raise ShapeMismatchError("labels/feature_names length mismatch")
        if self.task == CLASSIFICATION:
            if self.num_classes < 2:
                raise MalformedDataError("classification needs at least 2 classes")
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise MalformedDataError("class label out of range")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def missing_fraction(self):
        return 1.0 - float(self.mask.mean())

    def replace_features(self, features, mask) -> "Dataset":
        """Same dataset with substituted feature matrix/mask (for tests)."""
        return Dataset(
            self.name, features, mask, self.labels, self.feature_names,
            self.task, self.num_classes, self.label_names,
        )


def _numeric_sort_key(tokens):
    try:
        return sorted(tokens, key=float)
    except ValueError:
        return sorted(tokens)


def load_dataset(path, schema, missing_markers=None) -> Dataset:
    """Load a delimiter-separated file under a schema.

    The mask goes False exactly where a cell equals a missing marker
    (global markers, optionally overridden by ``missing_markers``, plus
    per-column extras). Binary-categorical features are encoded 0/1 by
    sorted token order; ignored columns are dropped; rows whose label is
    missing are rejected with one counted warning.
    """
    path = Path(path)
    if isinstance(schema, (str, Path)):
        schema = parse_schema(schema)
    if not path.exists():
        raise MalformedDataError(f"dataset file not found: {path}")
    global_markers = frozenset(missing_markers) if missing_markers is not None else schema.missing_markers

    rows = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    start = 1 if schema.has_header else 0
    ncol = len(schema.columns)
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        cells = line.split(schema.delimiter)
        if len(cells) != ncol:
            raise MalformedDataError(
                f"{path.name} line {lineno}: expected {ncol} cells, found {len(cells)}"
            )
        rows.append((lineno, [c.strip() for c in cells]))
    if not rows:
        raise EmptyDatasetError(f"{path.name}: no data rows")

    label_idx = schema.label_index()
    feature_cols = [(i, c) for i, c in enumerate(schema.columns) if c.role in (ROLE_NUMERIC, ROLE_BINARY)]

    # first pass: reject rows with missing labels
    kept = []
    dropped = 0
    for lineno, cells in rows:
        if cells[label_idx] in global_markers or cells[label_idx] in schema.columns[label_idx].extra_missing:
            dropped += 1
        else:
            kept.append((lineno, cells))
    if dropped:
        warnings.warn(f"{path.name}: dropped {dropped} row(s) with missing label")
    if not kept:
        raise EmptyDatasetError(f"{path.name}: no rows with observed labels")

    n, d = len(kept), len(feature_cols)
    features = np.full((n, d), np.nan)
    mask = np.zeros((n, d), dtype=bool)

    # binary columns: collect observed token vocabulary first
    binary_values = {}
    for j, (ci, col) in enumerate(feature_cols):
        if col.role != ROLE_BINARY:
            continue
        seen = set()
        for _, cells in kept:
            tok = cells[ci]
            if tok not in global_markers and tok not in col.extra_missing:
                seen.add(tok)
        if len(seen) > 2:
            raise MalformedDataError(
                f"{path.name}, column {col.name}: binary column has {len(seen)} distinct values"
            )
        binary_values[j] = {t: v for v, t in enumerate(_numeric_sort_key(seen))}

    for r, (lineno, cells) in enumerate(kept):
        for j, (ci, col) in enumerate(feature_cols):
            tok = cells[ci]
            if tok in global_markers or tok in col.extra_missing:
                continue
            if col.role == ROLE_BINARY:
                features[r, j] = binary_values[j][tok]
            else:
                try:
                    features[r, j] = float(tok)
                except ValueError:
                    raise MalformedDataError(
                        f"{path.name} line {lineno}, column {col.name}: cannot parse {tok!r}"
                    ) from None
            mask[r, j] = True

    label_col = schema.columns[label_idx]
    raw_labels = [cells[label_idx] for _, cells in kept]
    if schema.task == CLASSIFICATION:
        classes = _numeric_sort_key(set(raw_labels))
        index = {t: i for i, t in enumerate(classes)}
        labels = np.array([index[t] for t in raw_labels], dtype=np.int64)
        num_classes = len(classes)
        label_names = tuple(classes)
    else:
        try:
            labels = np.array([float(t) for t in raw_labels])
        except ValueError as exc:
            raise MalformedDataError(f"{path.name}, column {label_col.name}: {exc}") from None
        num_classes = 0
        label_names = ()

    return Dataset(
        name=path.stem,
        features=features,
        mask=mask,
        labels=labels,
        feature_names=tuple(c.name for _, c in feature_cols),
        task=schema.task,
        num_classes=num_classes,
        label_names=label_names,
    )


@dataclass(frozen=True)
class ColumnStats:
    """Per-feature mean/std over observed cells of one fitting split."""

    mean: np.ndarray
    std: np.ndarray
    observed_count: np.ndarray

    def __post_init__(self):
        if not (self.std > 0).all():
            raise ShapeMismatchError("column std must be positive")


def fit_column_stats(data: Dataset, rows) -> ColumnStats:
    """Mean/std (population convention) over observed cells of ``rows``.

    A feature with no observed cell in the split gets mean 0 / std 1; a
    feature with one observation or zero variance gets std 1 so that the
    downstream normalization stays finite.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ShapeMismatchError("rows must be nonempty")
    if rows.min() < 0 or rows.max() >= data.n_rows:
        raise ShapeMismatchError("row index out of range")
    x = data.features[rows]
    m = data.mask[rows]
    count = m.sum(axis=0)
    filled = np.where(m, x, 0.0)
    mean = np.zeros(data.n_features)
    np.divide(filled.sum(axis=0), count, out=mean, where=count > 0)
    centered = np.where(m, x - mean, 0.0)
    var = np.zeros(data.n_features)
    np.divide((centered ** 2).sum(axis=0), count, out=var, where=count > 0)
    std = np.sqrt(var)
    std[(count <= 1) | (std == 0.0)] = 1.0
    return ColumnStats(mean=mean, std=std, observed_count=count.astype(np.int64))


def impute_and_normalize(data: Dataset, stats: ColumnStats) -> np.ndarray:
    """Z-score observed cells; missing cells become exactly 0.

    Mean imputation followed by the same normalization maps the column
    mean to 0, so zero-fill after centering is the imputation itself.
    """
    if stats.mean.shape[0] != data.n_features:
        raise ShapeMismatchError(
            f"stats fit for d={stats.mean.shape[0]}, dataset has d={data.n_features}"
        )
    z = np.where(data.mask, (data.features - stats.mean) / stats.std, 0.0)
    if not np.isfinite(z).all():
        raise MalformedDataError("normalization produced non-finite values")
    return z


def denormalize(z: np.ndarray, stats: ColumnStats) -> np.ndarray:
    """Invert impute_and_normalize on fully observed data."""
    return z * stats.std + stats.mean


@dataclass(frozen=True)
class FoldPlan:
    """Deterministic outer-fold assignment for (nested) cross-validation."""

    num_outer_folds: int
    num_inner_folds: int
    assignments: np.ndarray  # N, outer fold index per row
    seed: int

    def outer_split(self, fold):
        """(train_rows, test_rows) for one outer fold."""
        test = np.flatnonzero(self.assignments == fold)
        train = np.flatnonzero(self.assignments != fold)
        return train, test


def assign_folds(labels, num_folds, seed, stratified) -> np.ndarray:
    """Round-robin fold assignment over a seeded shuffle.

    Stratified mode shuffles within each class and feeds the classes into
    one global round-robin stream, so per-class counts and total fold
    sizes both differ by at most 1 across folds.
    """
    n = len(labels)
    rng = seeding.generator(seed, seeding.FOLD_PLAN)
    if stratified:
        stream = []
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            if len(members) < num_folds:
                warnings.warn(
                    f"class {cls} has {len(members)} member(s) < {num_folds} folds; "
                    "stratification incomplete for this class"
                )
            stream.append(rng.permutation(members))
        stream = np.concatenate(stream)
    else:
        stream = rng.permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[stream] = np.arange(n) % num_folds
    return assignments


def make_fold_plan(data: Dataset, num_outer, num_inner, seed) -> FoldPlan:
    """Stratified (classification) or plain (regression) outer folds."""
    if num_outer < 2:
        raise ShapeMismatchError("num_outer must be >= 2")
    if data.n_rows < num_outer:
        raise ShapeMismatchError("fewer rows than outer folds")
    assignments = assign_folds(
        data.labels, num_outer, seed, stratified=data.task == CLASSIFICATION
    )
    return FoldPlan(num_outer, num_inner, assignments, int(seed))
