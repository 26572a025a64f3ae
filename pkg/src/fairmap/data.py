"""Dataset schema, CSV ingestion, one-hot encoding, splits and toy generators.

A dataset is a row-aligned triple ``(x, a, y)``: covariates, sensitive
attributes and the outcome.  Continuous columns are standardized with stats
frozen in the schema (computed from the first file loaded without stats, or
from the training split when :func:`load_train_test` is used); categorical
columns are one-hot expanded in the order fixed by the schema's category list.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

ROLES = ("covariate", "sensitive", "outcome")
KINDS = ("continuous", "categorical")


class SchemaError(ValueError):
    """Raised for an invalid or inconsistent schema."""


class LoadError(ValueError):
    """Raised when a CSV file cannot be parsed against its schema."""


@dataclass(frozen=True)
class ColumnSpec:
    """One column of the raw table.

    ``categories`` fixes the one-hot column order for categorical columns;
    ``mean``/``std`` are the frozen standardization stats for continuous ones
    (``None`` until computed).
    """

    name: str
    role: str
    kind: str
    categories: tuple[str, ...] | None = None
    mean: float | None = None
    std: float | None = None

    def validate(self) -> None:
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories or len(self.categories) < 2:
                raise SchemaError(
                    f"column {self.name!r}: categorical cardinality must be >= 2"
                )
        elif self.categories is not None:
            raise SchemaError(f"column {self.name!r}: continuous column with categories")


@dataclass(frozen=True)
class VarBlock:
    """Position of one variable inside an encoded matrix."""

    name: str
    kind: str
    start: int
    stop: int  # exclusive

    @property
    def width(self) -> int:
        return self.stop - self.start


def _blocks(columns: Sequence[ColumnSpec]) -> list[VarBlock]:
    blocks, offset = [], 0
    for col in columns:
        width = 1 if col.kind == "continuous" else len(col.categories or ())
        blocks.append(VarBlock(col.name, col.kind, offset, offset + width))
        offset += width
    return blocks


@dataclass(frozen=True)
class Schema:
    """Ordered column specs plus derived encoded-matrix layout."""

    columns: tuple[ColumnSpec, ...]

    def __post_init__(self) -> None:
        for col in self.columns:
            col.validate()
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        if len(self.outcome_columns()) != 1:
            raise SchemaError("schema must have exactly one outcome column")
        if not self.covariate_columns():
            raise SchemaError("schema must have at least one covariate")
        if not self.sensitive_columns():
            raise SchemaError("schema must have at least one sensitive column")

    def covariate_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.role == "covariate"]

    def sensitive_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.role == "sensitive"]

    def outcome_columns(self) -> list[ColumnSpec]:
        return [c for c in self.columns if c.role == "outcome"]

    @property
    def outcome(self) -> ColumnSpec:
        return self.outcome_columns()[0]

    @property
    def task(self) -> str:
        """``classification`` for a categorical outcome, else ``regression``."""
        return "classification" if self.outcome.kind == "categorical" else "regression"

    def covariate_blocks(self) -> list[VarBlock]:
        return _blocks(self.covariate_columns())

    def sensitive_blocks(self) -> list[VarBlock]:
        return _blocks(self.sensitive_columns())

    @property
    def x_dim(self) -> int:
        blocks = self.covariate_blocks()
        return blocks[-1].stop if blocks else 0

    @property
    def a_dim(self) -> int:
        blocks = self.sensitive_blocks()
        return blocks[-1].stop if blocks else 0

    def to_dict(self) -> dict:
        out = []
        for c in self.columns:
            entry: dict = {"name": c.name, "role": c.role, "kind": c.kind}
            if c.categories is not None:
                entry["categories"] = list(c.categories)
            if c.mean is not None:
                entry["mean"] = c.mean
                entry["std"] = c.std
            out.append(entry)
        return {"columns": out}

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        cols = []
        for entry in doc.get("columns", []):
            cats = entry.get("categories")
            cols.append(
                ColumnSpec(
                    name=entry["name"],
                    role=entry["role"],
                    kind=entry["kind"],
                    categories=tuple(cats) if cats is not None else None,
                    mean=entry.get("mean"),
                    std=entry.get("std"),
                )
            )
        return cls(tuple(cols))

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_file(cls, path: str | Path) -> "Schema":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid schema JSON {path}: {exc}") from exc
        return cls.from_dict(doc)


@dataclass
class Dataset:
    """Encoded, row-aligned dataset.

    ``x`` holds standardized continuous covariates and one-hot categorical
    blocks, ``a`` likewise for the sensitive attributes, ``y`` is a float
    vector (class index 0/1 for classification, raw value for regression).
    """

    schema: Schema
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    tag: str = ""

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.validate()

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def validate(self) -> None:
        if self.x.ndim != 2 or self.a.ndim != 2 or self.y.ndim != 1:
            raise SchemaError("x and a must be 2-d, y 1-d")
        if not (self.x.shape[0] == self.a.shape[0] == self.y.shape[0]):
            raise SchemaError("row counts of x, a, y differ")
        if self.x.shape[1] != self.schema.x_dim:
            raise SchemaError(
                f"x has {self.x.shape[1]} columns, schema expects {self.schema.x_dim}"
            )
        if self.a.shape[1] != self.schema.a_dim:
            raise SchemaError(
                f"a has {self.a.shape[1]} columns, schema expects {self.schema.a_dim}"
            )
        for mat, blocks in ((self.x, self.schema.covariate_blocks()),
                            (self.a, self.schema.sensitive_blocks())):
            for blk in blocks:
                if blk.kind != "categorical" or mat.shape[0] == 0:
                    continue
                sums = mat[:, blk.start:blk.stop].sum(axis=1)
                if not np.allclose(sums, 1.0, atol=1e-9):
                    raise SchemaError(f"one-hot block {blk.name!r} rows do not sum to 1")


def group_ids(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map each sensitive row to an integer group id.

    Returns ``(ids, levels)`` where ``levels[ids[i]] == a[i]``.
    """
    levels, ids = np.unique(np.asarray(a), axis=0, return_inverse=True)
    return ids.astype(np.int64), levels


# ---------------------------------------------------------------------------
# CSV pipeline
# ---------------------------------------------------------------------------


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError as exc:
        raise LoadError(f"row {row}, column {col!r}: cannot parse {cell!r}") from exc


def _encode_rows(rows: list[dict], schema: Schema) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode raw string rows into (x, a, y) without standardization."""

    def encode(columns: list[ColumnSpec]) -> np.ndarray:
        width = _blocks(columns)[-1].stop if columns else 0
        out = np.zeros((len(rows), width))
        for blk, col in zip(_blocks(columns), columns):
            for i, row in enumerate(rows):
                cell = row[col.name]
                if col.kind == "continuous":
                    out[i, blk.start] = _parse_float(cell, i, col.name)
                else:
                    try:
                        j = col.categories.index(cell)  # type: ignore[union-attr]
                    except ValueError:
                        raise LoadError(
                            f"row {i}, column {col.name!r}: unseen category {cell!r}"
                        ) from None
                    out[i, blk.start + j] = 1.0
        return out

    x = encode(schema.covariate_columns())
    a = encode(schema.sensitive_columns())
    out_col = schema.outcome
    y = np.zeros(len(rows))
    for i, row in enumerate(rows):
        cell = row[out_col.name]
        if out_col.kind == "continuous":
            y[i] = _parse_float(cell, i, out_col.name)
        else:
            try:
                y[i] = out_col.categories.index(cell)  # type: ignore[union-attr]
            except ValueError:
                raise LoadError(
                    f"row {i}, column {out_col.name!r}: unseen category {cell!r}"
                ) from None
    return x, a, y


def _standardize(schema: Schema, x: np.ndarray, a: np.ndarray, y: np.ndarray,
                 stat_rows: np.ndarray | None = None) -> tuple[Schema, np.ndarray, np.ndarray, np.ndarray]:
    """Apply (and, where missing, compute) standardization stats.

    Stats for columns that lack them are computed over ``stat_rows`` (all rows
    by default) and frozen into the returned schema.
    """
    x, a, y = x.copy(), a.copy(), y.copy()
    new_cols = list(schema.columns)

    def handle(mat: np.ndarray, columns: list[ColumnSpec]) -> None:
        for blk, col in zip(_blocks(columns), columns):
            if col.kind != "continuous":
                continue
            j = blk.start
            if col.mean is None:
                ref = mat[stat_rows, j] if stat_rows is not None else mat[:, j]
                mean = float(np.mean(ref))
                std = float(np.std(ref))
                if std == 0.0:
                    std = 1.0
                new_cols[schema.columns.index(col)] = replace(col, mean=mean, std=std)
                mat[:, j] = (mat[:, j] - mean) / std
            else:
                mat[:, j] = (mat[:, j] - col.mean) / (col.std or 1.0)

    handle(x, schema.covariate_columns())
    handle(a, schema.sensitive_columns())
    out = schema.outcome
    if out.kind == "continuous":
        if out.mean is None:
            ref = y[stat_rows] if stat_rows is not None else y
            mean, std = float(np.mean(ref)), float(np.std(ref)) or 1.0
            new_cols[schema.columns.index(out)] = replace(out, mean=mean, std=std)
            y = (y - mean) / std
        else:
            y = (y - out.mean) / (out.std or 1.0)
    return Schema(tuple(new_cols)), x, a, y


def load_csv(path: str | Path, schema: Schema | str | Path, tag: str = "") -> Dataset:
    """Load a CSV file against a schema.

    Continuous columns are standardized with the stats frozen in the schema;
    a schema without stats treats this file as the training data, computing
    and recording them.  Row order follows the file.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_file(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c.name for c in schema.columns if c.name not in header]
        if missing:
            raise LoadError(f"{path}: missing columns {missing}")
        rows = list(reader)
    x, a, y = _encode_rows(rows, schema)
    schema, x, a, y = _standardize(schema, x, a, y)
    return Dataset(schema, x, a, y, tag=tag or path.stem)


def load_train_test(path: str | Path, schema: Schema | str | Path,
                    test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Load a CSV, split it, and standardize with training-split stats only."""
    if not isinstance(schema, Schema):
        schema = Schema.from_file(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c.name for c in schema.columns if c.name not in (reader.fieldnames or [])]
        if missing:
            raise LoadError(f"{path}: missing columns {missing}")
        rows = list(reader)
    x, a, y = _encode_rows(rows, schema)
    train_idx, test_idx = _split_indices(len(rows), test_fraction, seed)
    schema, x, a, y = _standardize(schema, x, a, y, stat_rows=train_idx)
    train = Dataset(schema, x[train_idx], a[train_idx], y[train_idx], tag="train")
    test = Dataset(schema, x[test_idx], a[test_idx], y[test_idx], tag="test")
    return train, test


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset back to CSV, inverting standardization and one-hot."""
    schema = dataset.schema
    names = [c.name for c in schema.columns]
    cov_blocks = dict(zip((c.name for c in schema.covariate_columns()),
                          zip(schema.covariate_blocks(), schema.covariate_columns())))
    sen_blocks = dict(zip((c.name for c in schema.sensitive_columns()),
                          zip(schema.sensitive_blocks(), schema.sensitive_columns())))

    def decode(mat: np.ndarray, blk: VarBlock, col: ColumnSpec, i: int) -> str:
        if col.kind == "continuous":
            v = mat[i, blk.start]
            if col.mean is not None:
                v = v * (col.std or 1.0) + col.mean
            return repr(float(v))
        j = int(np.argmax(mat[i, blk.start:blk.stop]))
        return col.categories[j]  # type: ignore[index]

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        out_col = schema.outcome
        for i in range(dataset.n):
            row = []
            for col in schema.columns:
                if col.role == "covariate":
                    blk, c = cov_blocks[col.name]
                    row.append(decode(dataset.x, blk, c, i))
                elif col.role == "sensitive":
                    blk, c = sen_blocks[col.name]
                    row.append(decode(dataset.a, blk, c, i))
                else:
                    if out_col.kind == "continuous":
                        v = dataset.y[i]
                        if out_col.mean is not None:
                            v = v * (out_col.std or 1.0) + out_col.mean
                        row.append(repr(float(v)))
                    else:
                        row.append(out_col.categories[int(round(dataset.y[i]))])  # type: ignore[index]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"test fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(n * fraction))
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return train, test


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seed-deterministic disjoint train/test partition; ``fraction`` is the test share."""
    train_idx, test_idx = _split_indices(dataset.n, fraction, seed)
    train = Dataset(dataset.schema, dataset.x[train_idx], dataset.a[train_idx],
                    dataset.y[train_idx], tag="train")
    test = Dataset(dataset.schema, dataset.x[test_idx], dataset.a[test_idx],
                   dataset.y[test_idx], tag="test")
    return train, test


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

_TOY_REG_SCHEMA = Schema((
    ColumnSpec("x", "covariate", "continuous", mean=0.0, std=1.0),
    ColumnSpec("a", "sensitive", "categorical", categories=("0", "1")),
    ColumnSpec("y", "outcome", "continuous", mean=0.0, std=1.0),
))

_TOY_CLF_SCHEMA = Schema((
    ColumnSpec("x1", "covariate", "continuous", mean=0.0, std=1.0),
    ColumnSpec("x2", "covariate", "continuous", mean=0.0, std=1.0),
    ColumnSpec("a", "sensitive", "categorical", categories=("0", "1")),
    ColumnSpec("y", "outcome", "categorical", categories=("0", "1")),
))


def toy_regression(n: int = 5260, seed: int = 0) -> Dataset:
    """Biased regression toy: ``Y = (2A-1) sin(X) + 2AX + eps``.

    ``A ~ Bernoulli(0.5)``, ``X | A ~ Normal(A, 1)``, ``eps ~ Normal(0, 0.1^2)``.
    Columns are returned on their natural scale (identity stats); the default
    size covers a 4500/760 train/test split.
    """
    if n < 10:
        raise ValueError("toy_regression needs n >= 10")
    rng = np.random.default_rng(seed)
    a = rng.binomial(1, 0.5, size=n).astype(np.float64)
    x = rng.normal(a, 1.0)
    eps = rng.normal(0.0, 0.1, size=n)
    y = (2 * a - 1) * np.sin(x) + 2 * a * x + eps
    a_onehot = np.stack([1.0 - a, a], axis=1)
    return Dataset(_TOY_REG_SCHEMA, x[:, None], a_onehot, y, tag="toy_regression")


def toy_classification(n: int = 5000, seed: int = 0, label_noise: float = 0.0) -> Dataset:
    """Biased binary-classification toy with a documented generator.

    A latent ability ``Z ~ Normal(0, 1)`` drives the label through
    ``Y ~ Bernoulli(sigmoid(2.5 Z + 1.8 (2A-1) - 0.4))`` with
    ``A ~ Bernoulli(0.5)``.  The first covariate is a group-asymmetric
    measurement of the ability, ``X1 = Z + Normal(0, sigma_A)`` with
    ``sigma_1 = 0.4`` and ``sigma_0 = 2.0`` (group 0 is observed much more
    noisily), and ``X2 ~ Normal(1.5 A, 1)`` shifts by group.  The direct
    ``A`` term and the shifted/noisy covariates build in statistical-parity
    and equalized-odds gaps well above 0.3 while keeping classes roughly
    balanced.  ``label_noise`` flips each label independently with that
    probability (the "hard" variant).
    """
    if n < 10:
        raise ValueError("toy_classification needs n >= 10")
    if not 0.0 <= label_noise < 0.5:
        raise ValueError("label_noise must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    a = rng.binomial(1, 0.5, size=n).astype(np.float64)
    z = rng.normal(0.0, 1.0, size=n)
    x1 = z + rng.normal(0.0, 1.0, size=n) * (0.4 * a + 2.0 * (1.0 - a))
    x2 = rng.normal(1.5 * a, 1.0)
    eta = 2.5 * z + 1.8 * (2 * a - 1) - 0.4
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-eta))).astype(np.float64)
    if label_noise > 0.0:
        flip = rng.uniform(size=n) < label_noise
        y = np.where(flip, 1.0 - y, y)
    x = np.stack([x1, x2], axis=1)
    a_onehot = np.stack([1.0 - a, a], axis=1)
    return Dataset(_TOY_CLF_SCHEMA, x, a_onehot, y, tag="toy_classification")
