"""Flat result tables with byte-stable CSV and JSON forms."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

FORMATS = ("csv", "json")


class ReportError(OSError):
    pass


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str):
    for kind in (int, float):
        try:
            v = kind(text)
        except ValueError:
            continue
        return v
    return text


@dataclass
class ResultTable:
    """Rows of scalars (int, float or str) under a fixed column order.

    CSV cells are read back as int, then float, then str, so string cells that
    look numeric do not survive a CSV round trip; JSON keeps every type.
    """

    columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        for r in self.rows:
            self._check(r)

    def _check(self, row: dict) -> None:
        if tuple(row) != self.columns:
            raise ValueError(f"row keys {tuple(row)} do not match columns {self.columns}")
        for v in row.values():
            if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                raise TypeError(f"unsupported cell type {type(v).__name__}")

    def append(self, **row) -> None:
        if set(row) != set(self.columns):
            raise ValueError(f"row keys {sorted(row)} do not match columns {self.columns}")
        row = {c: row[c] for c in self.columns}
        self._check(row)
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultTable) or self.columns != other.columns or len(self) != len(other):
            return False
        for a, b in zip(self.rows, other.rows):
            for c in self.columns:
                x, y = a[c], b[c]
                if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
                    continue
                if type(x) is not type(y) or x != y:
                    return False
        return True

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(r[c]) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [[r[c] for c in self.columns] for r in self.rows]
        return json.dumps({"columns": list(self.columns), "rows": rows}, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            raise ValueError("CSV has no header")
        return cls(tuple(header), [dict(zip(header, map(_parse, line))) for line in reader])

    @classmethod
    def from_json(cls, text: str) -> "ResultTable":
        obj = json.loads(text)
        cols = tuple(obj["columns"])
        return cls(cols, [dict(zip(cols, r)) for r in obj["rows"]])


def emit_report(table: ResultTable, fmt: str, path) -> Path:
    """Write ``table`` as ``csv`` or ``json``; identical tables give identical bytes."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    text = table.to_csv() if fmt == "csv" else table.to_json()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write report to {path}: {exc.strerror or exc}") from None
    return path


def read_report(path) -> ResultTable:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return ResultTable.from_json(text) if path.suffix == ".json" else ResultTable.from_csv(text)
