"""Schema-driven loading, validation, cohort filtering and 5x2 splitting."""

from __future__ import annotations

import csv
import json
import math
import operator
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("continuous", "binary")
ROLES = ("covariate", "duration", "event")


class DataValidationError(ValueError):
    """Raised when a table or schema violates its declared contract."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "continuous"
    role: str = "covariate"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataValidationError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise DataValidationError(f"feature {self.name!r}: unknown role {self.role!r}")
        if self.role == "event" and self.kind != "binary":
            raise DataValidationError(f"event feature {self.name!r} must be binary")
        if self.role == "duration" and self.kind != "continuous":
            raise DataValidationError(f"duration feature {self.name!r} must be continuous")

    @property
    def is_binary(self) -> bool:
        return self.kind == "binary"


@dataclass(frozen=True)
class DatasetSchema:
    """Ordered feature list with exactly one duration and one event column."""

    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataValidationError("duplicate feature names in schema")
        for role in ("duration", "event"):
            count = sum(f.role == role for f in self.features)
            if count != 1:
                raise DataValidationError(f"schema needs exactly one {role} feature, got {count}")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def duration(self) -> str:
        return next(f.name for f in self.features if f.role == "duration")

    @property
    def event(self) -> str:
        return next(f.name for f in self.features if f.role == "event")

    @property
    def covariates(self) -> list[str]:
        return [f.name for f in self.features if f.role == "covariate"]

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([f.is_binary for f in self.features])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataValidationError(f"unknown feature {name!r}") from None

    def __getitem__(self, name: str) -> FeatureSpec:
        return self.features[self.index(name)]

    def to_list(self) -> list[dict]:
        return [{"name": f.name, "kind": f.kind, "role": f.role} for f in self.features]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "DatasetSchema":
        try:
            return cls(tuple(FeatureSpec(d["name"], d["kind"], d["role"]) for d in items))
        except (KeyError, TypeError) as exc:
            raise DataValidationError(f"malformed schema entry: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            try:
                items = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataValidationError(f"{path}: schema is not valid JSON ({exc})") from None
        if not isinstance(items, list):
            raise DataValidationError(f"{path}: schema must be a JSON array")
        return cls.from_list(items)


@dataclass(frozen=True, eq=False)
class Dataset:
    """An n x N numeric table bound to a schema. Rows are read-only."""

    schema: DatasetSchema
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float, copy=True)
        if rows.size == 0:
            rows = rows.reshape(0, len(self.schema))
        if rows.ndim != 2 or rows.shape[1] != len(self.schema):
            raise DataValidationError(
                f"rows must be n x {len(self.schema)}, got shape {rows.shape}"
            )
        _validate_values(rows, self.schema)
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.schema == other.schema and np.array_equal(self.rows, other.rows)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index(name)]

    @property
    def durations(self) -> np.ndarray:
        return self.column(self.schema.duration)

    @property
    def events(self) -> np.ndarray:
        return self.column(self.schema.event)

    def take(self, index) -> "Dataset":
        return Dataset(self.schema, self.rows[np.asarray(index, dtype=int)])

    def concat(self, *others: "Dataset") -> "Dataset":
        for o in others:
            if o.schema != self.schema:
                raise DataValidationError("cannot concatenate datasets with different schemas")
        return Dataset(self.schema, np.vstack([self.rows, *(o.rows for o in others)]))


def _validate_values(rows: np.ndarray, schema: DatasetSchema) -> None:
    bad = ~np.isfinite(rows)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataValidationError(f"row {r}, column {schema.names[c]!r}: non-finite value")
    for j, feat in enumerate(schema):
        col = rows[:, j]
        if feat.is_binary:
            wrong = np.flatnonzero((col != 0) & (col != 1))
            if wrong.size:
                raise DataValidationError(
                    f"row {wrong[0]}, column {feat.name!r}: binary value {col[wrong[0]]!r} not in {{0, 1}}"
                )
        if feat.role == "duration":
            wrong = np.flatnonzero(col < 0)
            if wrong.size:
                raise DataValidationError(
                    f"row {wrong[0]}, column {feat.name!r}: negative duration {col[wrong[0]]!r}"
                )


def load_csv(path, schema: DatasetSchema) -> Dataset:
    """Read a headed CSV and reorder its columns to ``schema`` order.

    Extra columns are ignored. Row numbers in error messages are 1-based data
    rows (the header is row 0).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file, header required") from None
        missing = [n for n in schema.names if n not in header]
        if missing:
            raise DataValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        positions = [header.index(n) for n in schema.names]
        rows = []
        for lineno, record in enumerate(reader, start=1):
            if not record or all(not cell.strip() for cell in record):
                continue
            values = []
            for name, pos in zip(schema.names, positions):
                cell = record[pos].strip() if pos < len(record) else ""
                try:
                    value = float(cell)
                except ValueError:
                    raise DataValidationError(
                        f"{path}: row {lineno}, column {name!r}: non-numeric cell {cell!r}"
                    ) from None
                if not math.isfinite(value):
                    raise DataValidationError(
                        f"{path}: row {lineno}, column {name!r}: non-finite cell {cell!r}"
                    )
                values.append(value)
            rows.append(values)
    table = np.array(rows, dtype=float).reshape(len(rows), len(schema))
    try:
        return Dataset(schema, table)
    except DataValidationError as exc:
        # row indices from the validator are 0-based
        msg = re.sub(r"^row (\d+)", lambda m: f"row {int(m.group(1)) + 1}", str(exc))
        raise DataValidationError(f"{path}: {msg}") from None


def format_number(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(dataset.schema.names)
        for row in dataset.rows:
            writer.writerow([format_number(x) for x in row])


def whas500_schema() -> DatasetSchema:
    with resources.files("mcm.data").joinpath("whas500_schema.json").open(encoding="utf-8") as fh:
        return DatasetSchema.from_list(json.load(fh))


def whas500_path() -> Path:
    return Path(str(resources.files("mcm.data").joinpath("whas500.csv")))


def load_whas500() -> Dataset:
    """The bundled 500-patient WHAS500 extract (8 columns)."""
    return load_csv(whas500_path(), whas500_schema())


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    """Five 2-fold partitions. Each pair is (first half, second half)."""

    pairs: tuple[tuple[np.ndarray, np.ndarray], ...]
    seed: int

    def folds(self):
        """Yield the ten (repetition, fold, train_idx, test_idx) evaluations."""
        for rep, (a, b) in enumerate(self.pairs):
            yield rep, 0, a, b
            yield rep, 1, b, a


def make_5x2_folds(dataset: Dataset | int, seed: int) -> FoldPlan:
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n < 4:
        raise DataValidationError(f"5x2 cross-validation needs at least 4 rows, got {n}")
    rng = np.random.default_rng(seed)
    half = (n + 1) // 2
    pairs = []
    for _ in range(5):
        perm = rng.permutation(n)
        pairs.append((np.sort(perm[:half]), np.sort(perm[half:])))
    return FoldPlan(tuple(pairs), seed)


# -------------------------------------------------------------- cohorts

_OPS = {
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    ">=": operator.ge,
    "≤": operator.le,
    "≥": operator.ge,
    "=": operator.eq,
    "==": operator.eq,
}
_CLAUSE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(<=|>=|==|≤|≥|<|>|=)\s*([-+0-9.eE]+)\s*$")


@dataclass(frozen=True)
class Comparison:
    feature: str
    op: str
    value: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise DataValidationError(f"unknown comparator {self.op!r}")

    def __str__(self):
        return f"{self.feature}{self.op}{format_number(self.value)}"

    def evaluate(self, column: np.ndarray) -> np.ndarray:
        return _OPS[self.op](column, self.value)


def parse_predicate(text: str | Sequence) -> list[Comparison]:
    """Parse ``"age>=75 & sbp<200"`` (or a list of clause strings / tuples)."""
    if isinstance(text, str):
        clauses: list = [c for c in re.split(r"\s*(?:&|,|\band\b)\s*", text) if c]
    else:
        clauses = list(text)
    out = []
    for clause in clauses:
        if isinstance(clause, Comparison):
            out.append(clause)
            continue
        if not isinstance(clause, str):
            feat, op, val = clause
            out.append(Comparison(feat, op, float(val)))
            continue
        m = _CLAUSE.match(clause)
        if not m:
            raise DataValidationError(f"cannot parse cohort clause {clause!r}")
        out.append(Comparison(m.group(1), m.group(2), float(m.group(3))))
    return out


def cohort_mask(dataset: Dataset, predicate) -> np.ndarray:
    keep = np.ones(len(dataset), dtype=bool)
    for comp in parse_predicate(predicate):
        keep &= comp.evaluate(dataset.column(comp.feature))
    return keep


def filter_cohort(dataset: Dataset, predicate) -> Dataset:
    return Dataset(dataset.schema, dataset.rows[cohort_mask(dataset, predicate)])


# -------------------------------------------------------------- summary


@dataclass(frozen=True)
class FeatureSummary:
    name: str
    kind: str
    mean: float
    sd: float | None = None
    proportion: float | None = None


def summarize(dataset: Dataset) -> list[FeatureSummary]:
    n = len(dataset)
    if n == 0:
        raise DataValidationError("cannot summarize an empty dataset")
    out = []
    for j, feat in enumerate(dataset.schema):
        col = dataset.rows[:, j]
        mean = float(col.mean())
        if feat.is_binary:
            out.append(FeatureSummary(feat.name, feat.kind, mean, proportion=mean))
        else:
            sd = float(col.std(ddof=1)) if n > 1 else 0.0
            out.append(FeatureSummary(feat.name, feat.kind, mean, sd=sd))
    return out
