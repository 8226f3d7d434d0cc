"""Dataset container, column standardization, and CSV input/output.

A :class:`Dataset` is the unit of all estimation: an outcome vector ``y``,
a treatment vector ``t``, and a covariate matrix ``x`` with one row per
observation.  Everything here is a pure function of its inputs; datasets
are immutable after construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DuplicateIndex,
    IndexOutOfRange,
    NonFinite,
    ParseError,
    SchemaError,
)

# Population standard deviations below this are treated as constant columns.
DEGENERATE_SCALE = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """Outcome, treatment, and covariates for ``n`` observations.

    Invariants enforced at construction: matching lengths, n >= 2, p >= 1,
    and all entries finite.
    """

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    column_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        y = _readonly(np.asarray(self.y, dtype=float).reshape(-1))
        t = _readonly(np.asarray(self.t, dtype=float).reshape(-1))
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ValueError("x must be a 2-d matrix")
        x = _readonly(x)
        if not (len(y) == len(t) == x.shape[0]):
            raise ValueError(
                f"length mismatch: y={len(y)}, t={len(t)}, x rows={x.shape[0]}"
            )
        if len(y) < 2:
            raise ValueError("need at least 2 observations")
        if x.shape[1] < 1:
            raise ValueError("need at least 1 covariate")
        for name, arr in (("y", y), ("t", t), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"non-finite entries in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class StandardizationReport:
    """Per-column means and population scales used to standardize a matrix."""

    means: np.ndarray
    scales: np.ndarray
    degenerate: np.ndarray  # bool per column; True where scale ~ 0


@dataclass(frozen=True)
class ColumnSchema:
    """Names of the outcome, treatment, and covariate columns in a CSV."""

    outcome: str
    treatment: str
    covariates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        names = [self.outcome, self.treatment, *self.covariates]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema names must be distinct, got {names}")
        if not self.covariates:
            raise SchemaError("schema needs at least one covariate column")

    @property
    def all_names(self) -> tuple[str, ...]:
        return (self.outcome, self.treatment, *self.covariates)


def standardize(m: np.ndarray) -> tuple[np.ndarray, StandardizationReport]:
    """Center each column to mean 0 and scale to population sd 1.

    Constant columns (population sd < 1e-12) are emitted as all zeros and
    flagged in the report instead of raising: downstream distance
    computations stay well-defined.

    Raises NonFinite on NaN/inf input.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    if m.shape[0] < 2:
        raise ValueError("need at least 2 rows to standardize")
    if not np.all(np.isfinite(m)):
        raise NonFinite("non-finite entries in matrix")

    means = m.mean(axis=0)
    scales = m.std(axis=0)  # population (1/n) standard deviation
    degenerate = scales < DEGENERATE_SCALE

    safe = np.where(degenerate, 1.0, scales)
    out = (m - means) / safe
    out[:, degenerate] = 0.0
    return out, StandardizationReport(
        means=_readonly(means), scales=_readonly(safe), degenerate=degenerate.copy()
    )


def load_csv(path, schema: ColumnSchema) -> Dataset:
    """Read a CSV file with a header row into a Dataset.

    Column order in the result follows the schema, not the file.  Raises
    SchemaError for missing columns, ParseError for non-numeric cells or
    ragged rows (identifying the offending row and column), and NonFinite
    for nan/inf literals.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]

        positions = {}
        for name in schema.all_names:
            if name not in header:
                raise SchemaError(f"{path}: column {name!r} not in header {header}")
            positions[name] = header.index(name)

        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"{path}: line {lineno} has {len(record)} cells, "
                    f"header has {len(header)}"
                )
            parsed = []
            for name in schema.all_names:
                cell = record[positions[name]].strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}, column {name!r}: "
                        f"non-numeric cell {cell!r}"
                    )
                if not np.isfinite(value):
                    raise NonFinite(
                        f"{path}: line {lineno}, column {name!r}: "
                        f"non-finite value {cell!r}"
                    )
                parsed.append(value)
            rows.append(parsed)

    if len(rows) < 2:
        raise ParseError(f"{path}: need at least 2 data rows, got {len(rows)}")
    table = np.array(rows, dtype=float)
    return Dataset(
        y=table[:, 0],
        t=table[:, 1],
        x=table[:, 2:],
        column_names=schema.all_names,
    )


def write_csv(path, d: Dataset) -> None:
    """Write a Dataset back to CSV in schema order (outcome, treatment, covariates)."""
    names = d.column_names or (
        "y",
        "t",
        *[f"x{j + 1}" for j in range(d.p)],
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(d.n):
            writer.writerow(
                [repr(float(d.y[i])), repr(float(d.t[i])),
                 *[repr(float(v)) for v in d.x[i]]]
            )


def subset_rows(d: Dataset, idx) -> Dataset:
    """Select rows by index, preserving the given order.

    Raises IndexOutOfRange or DuplicateIndex on bad index lists.
    """
    idx = np.asarray(idx, dtype=int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= d.n):
        raise IndexOutOfRange(f"indices must lie in [0, {d.n}), got {idx}")
    if len(np.unique(idx)) != len(idx):
        raise DuplicateIndex("duplicate row indices in subset")
    return Dataset(
        y=d.y[idx], t=d.t[idx], x=d.x[idx], column_names=d.column_names
    )
