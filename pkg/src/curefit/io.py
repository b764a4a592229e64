"""CSV/JSON reading and writing for cohorts, fits and curves.

Cohort CSV files carry a header with ``id, entry, time, status`` followed by
numeric covariate columns. Floats are written with 17 significant digits so
that a file read back reproduces the in-memory values exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import DataValidationError
from .model import Dataset, Status, build_dataset

__all__ = [
    "REQUIRED_COLUMNS",
    "CohortTable",
    "read_cohort_csv",
    "write_cohort_csv",
    "format_float",
    "to_jsonable",
    "dump_json",
    "write_rows_csv",
]

REQUIRED_COLUMNS = ("id", "entry", "time", "status")


def format_float(x) -> str:
    """17 significant digits; ``nan``/``inf`` spelled out, integers kept short."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


class _Float17(float):
    def __repr__(self):
        return format_float(self)


def to_jsonable(obj):
    """Convert numpy containers and floats into JSON-ready values.

    Non-finite floats become ``None``.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return _Float17(x) if math.isfinite(x) else None
    return obj


def dump_json(obj, fh=None) -> str:
    """Serialize with 17-digit floats and sorted-free, stable key order."""
    text = _encode(to_jsonable(obj), 0) + "\n"
    if fh is not None:
        fh.write(text)
    return text


def _encode(obj, level):
    # json.dumps calls float.__repr__ on the base class, so floats are
    # rendered here to keep the 17-digit format.
    pad = "  " * (level + 1)
    end = "  " * level
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, float):
        return format_float(obj)
    return json.dumps(obj)


def write_rows_csv(fh, header: Sequence[str], rows) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


@dataclass(frozen=True, eq=False)
class CohortTable:
    """Parsed cohort file prior to choosing the model design."""

    ids: tuple
    entry: np.ndarray
    time: np.ndarray
    status: np.ndarray
    covariates: dict

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def columns(self) -> list[str]:
        return list(self.covariates)

    def subset(self, mask) -> "CohortTable":
        mask = np.asarray(mask, dtype=bool)
        return CohortTable(tuple(i for i, m in zip(self.ids, mask) if m),
                           self.entry[mask], self.time[mask], self.status[mask],
                           {k: v[mask] for k, v in self.covariates.items()})

    def resolve_tau(self, tau: float | None = None) -> float:
        """Cure horizon: the common cured time, or ``tau`` if given.

        Raises
        ------
        DataValidationError
            If cured rows disagree with each other or with ``tau``, or if no
            cured rows exist and ``tau`` is not given.
        """
        cured = self.status == Status.CURED
        times = np.unique(self.time[cured])
        if tau is None:
            if times.size == 0:
                raise DataValidationError("no cured rows; pass tau explicitly")
            tau = float(times.max())
        for i in np.flatnonzero(cured):
            if self.time[i] != tau:
                raise DataValidationError(
                    f"cured subject has time {self.time[i]} != tau={tau}", row=int(i) + 1)
        return float(tau)

    def to_dataset(self, cure_cols: Sequence[str], latency_cols: Sequence[str],
                   tau: float | None = None) -> Dataset:
        for col in list(cure_cols) + list(latency_cols):
            if col not in self.covariates:
                raise DataValidationError(f"unknown covariate column {col!r}")
        tau = self.resolve_tau(tau)
        n = self.n
        z1 = np.column_stack([np.ones(n)] + [self.covariates[c] for c in cure_cols])
        z2 = (np.column_stack([self.covariates[c] for c in latency_cols])
              if latency_cols else np.empty((n, 0)))
        records = zip(self.ids, self.entry, self.time, self.status, z1, z2)
        return build_dataset(records, tau, ("intercept",) + tuple(cure_cols),
                             tuple(latency_cols))


def read_cohort_csv(source) -> CohortTable:
    """Read a cohort CSV from a path or an open text handle.

    Raises
    ------
    DataValidationError
        Missing header columns, unparsable numbers or unknown status labels;
        the message names the 1-based data row.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return _read(fh)
    return _read(source)


def _read(fh) -> CohortTable:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataValidationError("empty input") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise DataValidationError(f"missing required columns: {', '.join(missing)}")
    if len(set(header)) != len(header):
        raise DataValidationError("duplicate column names in header")
    pos = {c: header.index(c) for c in REQUIRED_COLUMNS}
    cov_names = [h for h in header if h not in REQUIRED_COLUMNS]
    cov_pos = [header.index(c) for c in cov_names]
    ids, entry, time, status = [], [], [], []
    covs = [[] for _ in cov_names]
    seen = set()
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataValidationError(
                f"expected {len(header)} fields, found {len(row)}", row=row_no)
        rid = row[pos["id"]].strip()
        if rid in seen:
            raise DataValidationError(f"duplicate id {rid!r}", row=row_no)
        seen.add(rid)
        try:
            q = float(row[pos["entry"]])
            x = float(row[pos["time"]])
            st = Status.parse(row[pos["status"]])
            vals = [float(row[p]) for p in cov_pos]
        except ValueError as exc:
            raise DataValidationError(str(exc), row=row_no) from None
        if not all(math.isfinite(v) for v in [q, x, *vals]):
            raise DataValidationError("non-finite value", row=row_no)
        if q < 0:
            raise DataValidationError(f"entry {q} is negative", row=row_no)
        if q >= x:
            raise DataValidationError(f"entry {q} is not before time {x}", row=row_no)
        ids.append(rid)
        entry.append(q)
        time.append(x)
        status.append(int(st))
        for lst, v in zip(covs, vals):
            lst.append(v)
    if not ids:
        raise DataValidationError("no data rows")
    return CohortTable(tuple(ids), np.array(entry), np.array(time),
                       np.array(status, dtype=np.int8),
                       {c: np.array(v) for c, v in zip(cov_names, covs)})


def write_cohort_csv(fh, data: Dataset, covariate_names: Sequence[str] | None = None,
                     columns: np.ndarray | None = None) -> None:
    """Write a dataset in the cohort CSV schema.

    By default the covariate columns are ``z1`` without its intercept; pass
    ``columns`` (n x p) and ``covariate_names`` to write a different design.
    """
    if columns is None:
        columns = data.z1[:, 1:]
        if covariate_names is None:
            covariate_names = data.z1_names[1:] if data.z1_names else [
                f"x{j + 1}" for j in range(columns.shape[1])]
    header = list(REQUIRED_COLUMNS) + list(covariate_names)
    labels = {int(s): s.name.lower() for s in Status}
    rows = ([data.ids[i], data.entry[i], data.time[i], labels[int(data.status[i])],
             *columns[i]] for i in range(data.n))
    write_rows_csv(fh, header, rows)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    write_rows_csv(buf, header, rows)
    return buf.getvalue()
