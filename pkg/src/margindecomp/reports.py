"""Versioned structured-text reports and comma-separated plot data.

A report is a key=value header (full configuration and seed, no timestamps)
followed by named tables. The grammar ships with the package in
``report_schema.txt``; :func:`validate_report_text` enforces it. Re-running
a command with the same configuration reproduces a report byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "Report",
    "ReportFormatError",
    "write_report",
    "read_report",
    "validate_report_text",
    "schema_text",
    "write_series",
]

_MAGIC_LINE = "# margindecomp-report v1"
_SCHEMA_KEY = "schema"
_SCHEMA_VALUE = "margindecomp-report/1"
_TABLE_NAME = re.compile(r"^[a-z0-9_]+$")


class ReportFormatError(ValueError):
    """Report text violates the published grammar."""


@dataclass
class Report:
    """Header metadata plus named tables of stringified measurements."""

    meta: dict[str, str] = field(default_factory=dict)
    tables: dict[str, tuple[list[str], list[list[str]]]] = field(default_factory=dict)

    def add_table(self, name: str, columns: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
        if not _TABLE_NAME.match(name):
            raise ValueError(f"table name {name!r} must match [a-z0-9_]+")
        if name in self.tables:
            raise ValueError(f"duplicate table {name!r}")
        cols = [str(c) for c in columns]
        body = [[_cell(v) for v in row] for row in rows]
        for row in body:
            if len(row) != len(cols):
                raise ValueError(f"table {name!r}: row width {len(row)} != {len(cols)} columns")
        self.tables[name] = (cols, body)

    def table(self, name: str) -> tuple[list[str], list[list[str]]]:
        return self.tables[name]


def _cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".6f")
    return str(value)


def render_report(report: Report) -> str:
    meta = dict(report.meta)
    meta.setdefault(_SCHEMA_KEY, _SCHEMA_VALUE)
    if "seed" not in meta:
        raise ValueError("report header must include the seed")
    lines = [_MAGIC_LINE]
    lines.append(f"{_SCHEMA_KEY} = {meta.pop(_SCHEMA_KEY)}")
    for key, value in meta.items():
        if not key or any(c.isspace() for c in key) or "=" in key:
            raise ValueError(f"bad header key {key!r}")
        lines.append(f"{key} = {value}")
    for name, (cols, rows) in report.tables.items():
        lines.append("")
        lines.append(f"[table {name}]")
        lines.append(",".join(cols))
        for row in rows:
            lines.append(",".join(row))
        lines.append("[end]")
    return "\n".join(lines) + "\n"


def write_report(report: Report, path) -> None:
    text = render_report(report)
    validate_report_text(text)
    Path(path).write_text(text, encoding="utf-8")


def read_report(path) -> Report:
    text = Path(path).read_text(encoding="utf-8")
    validate_report_text(text)
    lines = text.splitlines()
    meta: dict[str, str] = {}
    tables: dict[str, tuple[list[str], list[list[str]]]] = {}
    i = 1
    while i < len(lines) and lines[i]:
        key, _, value = lines[i].partition(" = ")
        meta[key] = value
        i += 1
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        name = lines[i][len("[table ") : -1]
        cols = lines[i + 1].split(",")
        rows = []
        i += 2
        while lines[i] != "[end]":
            rows.append(lines[i].split(","))
            i += 1
        tables[name] = (cols, rows)
        i += 1
    return Report(meta=meta, tables=tables)


def validate_report_text(text: str) -> None:
    """Raise :class:`ReportFormatError` unless ``text`` matches the grammar."""
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC_LINE:
        raise ReportFormatError(f"first line must be {_MAGIC_LINE!r}")
    i = 1
    seen_keys: set[str] = set()
    while i < len(lines) and lines[i]:
        m = re.match(r"^(\S+) = (.*)$", lines[i])
        if not m or "=" in m.group(1):
            raise ReportFormatError(f"bad header line {i + 1}: {lines[i]!r}")
        key = m.group(1)
        if key in seen_keys:
            raise ReportFormatError(f"duplicate header key {key!r}")
        seen_keys.add(key)
        i += 1
    if _SCHEMA_KEY not in seen_keys or "seed" not in seen_keys:
        raise ReportFormatError("header must include 'schema' and 'seed'")
    seen_tables: set[str] = set()
    while i < len(lines):
        if not lines[i]:
            i += 1
            continue
        m = re.match(r"^\[table ([a-z0-9_]+)\]$", lines[i])
        if not m:
            raise ReportFormatError(f"expected '[table name]' at line {i + 1}: {lines[i]!r}")
        name = m.group(1)
        if name in seen_tables:
            raise ReportFormatError(f"duplicate table {name!r}")
        seen_tables.add(name)
        i += 1
        if i >= len(lines):
            raise ReportFormatError(f"table {name!r} missing its column row")
        width = len(lines[i].split(","))
        i += 1
        closed = False
        while i < len(lines):
            if lines[i] == "[end]":
                closed = True
                i += 1
                break
            if len(lines[i].split(",")) != width:
                raise ReportFormatError(f"table {name!r}: ragged row at line {i + 1}")
            i += 1
        if not closed:
            raise ReportFormatError(f"table {name!r} not closed with [end]")


def schema_text() -> str:
    """The grammar file shipped inside the package."""
    return resources.files("margindecomp").joinpath("report_schema.txt").read_text(encoding="utf-8")


def write_series(path, columns: Sequence[str], rows: Iterable[Sequence[object]]) -> None:
    """One plot-data series as a plain comma-separated file."""
    lines = [",".join(str(c) for c in columns)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
