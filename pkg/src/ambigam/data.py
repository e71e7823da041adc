"""Columnar datasets: CSV ingestion, centering and dichotomization.

A :class:`Dataset` holds equally long named columns that are either numeric
(float64 arrays) or factors (arrays of level labels).  Datasets never change
after construction; every transformation returns a new one.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

NUMERIC = "numeric"
FACTOR = "factor"

MISSING_TOKENS = frozenset({"", "NA", "na", "N/A", "NaN", "nan", "null", "NULL"})
_DECIMAL = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class DataError(ValueError):
    """Base class for dataset errors."""


class MissingColumn(DataError):
    def __init__(self, name: str):
        super().__init__(f"column {name!r} not found")
        self.name = name


class ParseError(DataError):
    def __init__(self, row: int, column: str, value: str = ""):
        super().__init__(f"line {row}: cannot parse {value!r} in numeric column {column!r}")
        self.row = row
        self.column = column


class EmptyDataset(DataError):
    pass


class NotNumeric(DataError):
    def __init__(self, name: str):
        super().__init__(f"column {name!r} is not numeric")
        self.name = name


class DegenerateFactor(DataError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str = NUMERIC
    role: str = "covariate"

    def __post_init__(self):
        if self.kind not in (NUMERIC, FACTOR):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.role not in ("response", "covariate", "group"):
            raise ValueError(f"unknown column role {self.role!r}")


def _freeze(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.setflags(write=False)
    return values


def _first_appearance(values: np.ndarray) -> tuple[str, ...]:
    seen = dict.fromkeys(values.tolist())
    return tuple(str(v) for v in seen)


@dataclass(frozen=True)
class Dataset:
    """Immutable table of numeric and factor columns.

    ``levels`` maps each factor column to its level order, which fixes the
    contrast coding used by design matrices.  ``meta`` carries provenance
    such as dropped-row counts and the means removed by :func:`center`.
    """

    columns: Mapping[str, np.ndarray]
    levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    response_name: str | None = None
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        cols = {}
        levels = dict(self.levels)
        n = None
        for name, values in self.columns.items():
            if not isinstance(name, str) or not name:
                raise DataError("column names must be non-empty strings")
            arr = np.asarray(values)
            if arr.ndim != 1:
                raise DataError(f"column {name!r} must be one-dimensional")
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise DataError(f"column {name!r} has length {len(arr)}, expected {n}")
            if arr.dtype.kind in "biuf":
                arr = arr.astype(np.float64)
                if not np.all(np.isfinite(arr)):
                    raise DataError(f"column {name!r} contains non-finite values")
                levels.pop(name, None)
            else:
                arr = arr.astype(str).astype(object)
                if name not in levels:
                    levels[name] = _first_appearance(arr)
                elif not set(arr.tolist()) <= set(levels[name]):
                    raise DataError(f"column {name!r} has values outside its levels")
            cols[name] = _freeze(arr)
        if not n:
            raise EmptyDataset("a dataset needs at least one row")
        if self.response_name is not None and self.response_name not in cols:
            raise MissingColumn(self.response_name)
        object.__setattr__(self, "columns", MappingProxyType(cols))
        object.__setattr__(self, "levels", MappingProxyType(levels))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @property
    def n(self) -> int:
        return len(next(iter(self.columns.values())))

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingColumn(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def is_factor(self, name: str) -> bool:
        self[name]
        return name in self.levels

    def numeric(self, name: str) -> np.ndarray:
        if self.is_factor(name):
            raise NotNumeric(name)
        return self.columns[name]

    def replace(self, columns=None, levels=None, meta=None, response_name=...) -> "Dataset":
        """Copy with some columns/levels/meta entries added or overwritten."""
        cols = dict(self.columns)
        lev = dict(self.levels)
        for name, values in (columns or {}).items():
            cols[name] = values
            lev.pop(name, None)
        lev.update(levels or {})
        new_meta = dict(self.meta)
        new_meta.update(meta or {})
        resp = self.response_name if response_name is ... else response_name
        return Dataset(cols, lev, resp, new_meta)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset({k: v[rows] for k, v in self.columns.items()}, dict(self.levels),
                       self.response_name, dict(self.meta))


def from_arrays(response_name: str | None = None, **columns) -> Dataset:
    return Dataset(columns, response_name=response_name)


def _parse_decimal(text: str) -> float:
    if not _DECIMAL.match(text):
        raise ValueError(text)
    return float(text)


def load_csv(path, schema: Sequence[ColumnSchema]) -> Dataset:
    """Read the declared columns of a headed CSV file.

    Rows with a missing value in any declared column are dropped listwise;
    the count is stored in ``meta["dropped_rows"]``.  Numeric cells must be
    plain decimals with a '.' separator.  ``ParseError.row`` is the 1-based
    line number in the file (the header is line 1).
    """
    schema = list(schema)
    responses = [c.name for c in schema if c.role == "response"]
    if len(responses) > 1:
        raise DataError("at most one column may carry role=response")
    if len({c.name for c in schema}) != len(schema):
        raise DataError("duplicate column names in schema")

    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        index = {}
        for col in schema:
            if col.name not in header:
                raise MissingColumn(col.name)
            index[col.name] = header.index(col.name)

        values: dict[str, list] = {c.name: [] for c in schema}
        dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            cells = {}
            missing = False
            for col in schema:
                j = index[col.name]
                cell = row[j].strip() if j < len(row) else ""
                if cell in MISSING_TOKENS:
                    missing = True
                    continue
                if col.kind == NUMERIC:
                    try:
                        cells[col.name] = _parse_decimal(cell)
                    except ValueError:
                        raise ParseError(line_no, col.name, cell) from None
                else:
                    cells[col.name] = cell
            if missing:
                dropped += 1
                continue
            for name, v in cells.items():
                values[name].append(v)

    if not values[schema[0].name]:
        raise EmptyDataset(f"{path}: no complete rows")
    columns = {}
    for col in schema:
        if col.kind == NUMERIC:
            columns[col.name] = np.array(values[col.name], dtype=np.float64)
        else:
            columns[col.name] = np.array(values[col.name], dtype=object)
    meta = {"dropped_rows": dropped, "source": str(path)}
    return Dataset(columns, response_name=responses[0] if responses else None, meta=meta)


def write_csv(ds: Dataset, path, names: Iterable[str] | None = None) -> None:
    """Write columns with 17 significant digits, so a reload is bit-identical."""
    names = list(names) if names is not None else ds.names
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        cols = [ds[name] for name in names]
        factor = [ds.is_factor(name) for name in names]
        for i in range(ds.n):
            writer.writerow([c[i] if f else format(c[i], ".17g") for c, f in zip(cols, factor)])


def schema_for(numeric: Iterable[str] = (), factors: Iterable[str] = (),
               response: str | None = None) -> list[ColumnSchema]:
    out = []
    if response is not None:
        out.append(ColumnSchema(response, NUMERIC, "response"))
    out += [ColumnSchema(n, NUMERIC) for n in numeric if n != response]
    out += [ColumnSchema(n, FACTOR, "group") for n in factors]
    return out


def center(ds: Dataset, names: Sequence[str]) -> Dataset:
    """Subtract column means; cumulative means are kept in ``meta["means"]``."""
    means = dict(ds.meta.get("means", {}))
    new = {}
    for name in names:
        values = ds.numeric(name)
        m = float(values.mean())
        new[name] = values - m
        means[name] = means.get(name, 0.0) + m
    return ds.replace(columns=new, meta={"means": means})


def dichotomize(ds: Dataset, name: str, threshold: float = 0.0) -> Dataset:
    values = ds.numeric(name)
    labels = np.where(values < threshold, "neg", "pos").astype(object)
    n_neg = int(np.sum(values < threshold))
    if n_neg in (0, len(values)):
        raise DegenerateFactor(f"all observations of {name!r} fall on one side of {threshold}")
    new_name = f"{name}_f"
    return ds.replace(columns={new_name: labels}, levels={new_name: ("neg", "pos")})
