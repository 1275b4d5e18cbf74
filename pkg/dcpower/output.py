"""Result tables and their CSV / gnuplot .dat / metadata files."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__

logger = logging.getLogger(__name__)

INFEASIBLE = "infeasible"


@dataclass
class ResultTable:
    """Named columns, typed rows and the metadata of the run that produced them.

    ``None`` in a row marks an infeasible point; it is written as
    ``infeasible`` in CSV and ``nan`` in .dat files.
    """

    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def add_row(self, *values: Any) -> None:
        if len(values) != len(self.columns):
            raise ValueError(
                f"table {self.name!r} has {len(self.columns)} columns, got a row of {len(values)}"
            )
        self.rows.append(list(values))

    def column(self, name: str) -> list[Any]:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]


def format_value(value: Any) -> str:
    """Deterministic text form: 12 significant digits for floats."""
    if value is None:
        return INFEASIBLE
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".12g")
    return str(value)


def write_csv(table: ResultTable, path: Path) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(table.columns)
        for row in table.rows:
            writer.writerow([format_value(v) for v in row])
    return path


def write_dat(table: ResultTable, path: Path) -> Path:
    """gnuplot-readable whitespace columns; the header is a comment line."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {table.name}\n")
        f.write("# " + " ".join(table.columns) + "\n")
        for row in table.rows:
            f.write(" ".join("nan" if v is None else format_value(v) for v in row) + "\n")
    return path


def build_metadata(config_hash: str, seed: int, **extra: Any) -> dict[str, Any]:
    return {
        "config_hash": config_hash,
        "seed": seed,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        **extra,
    }


def write_metadata(table: ResultTable, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"table": table.name, "columns": table.columns, **table.metadata}, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_table(table: ResultTable, directory: Path, formats: Sequence[str] = ("csv",)) -> list[Path]:
    """Write ``table`` in every requested format plus ``<name>.meta.json``.

    The data files hold no timestamps, so they are byte-identical for the
    same config and seed.
    """
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            written.append(write_csv(table, directory / f"{table.name}.csv"))
        elif fmt == "dat":
            written.append(write_dat(table, directory / f"{table.name}.dat"))
        else:
            raise ValueError(f"unknown output format {fmt!r}")
    written.append(write_metadata(table, directory / f"{table.name}.meta.json"))
    logger.debug("Wrote table %s (%d rows) to %s", table.name, len(table.rows), [p.name for p in written])
    return written
