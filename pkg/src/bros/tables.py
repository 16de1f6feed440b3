"""Delimited output with a leading manifest comment block."""

from __future__ import annotations

import csv
import io
import json
import math
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

from bros import __version__


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (float, Fraction)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        return f"{f:.17g}"
    return str(v)


def manifest_lines(subcommand: str, config: Mapping | None = None, seed: int | None = None, **extra) -> list[str]:
    lines = [f"tool: bros {__version__}", f"subcommand: {subcommand}"]
    if config is not None:
        lines.append("config: " + json.dumps(config, sort_keys=True, separators=(",", ":")))
    if seed is not None:
        lines.append(f"seed: {seed}")
    for k, v in extra.items():
        lines.append(f"{k}: {v}")
    return lines


def write_csv(fh: TextIO, columns: Sequence[str], rows: Iterable[Mapping], manifest: Sequence[str] = ()) -> None:
    for line in manifest:
        fh.write(f"# {line}\n")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])


def emit_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Mapping], manifest: Sequence[str] = ()) -> None:
    """Write header plus rows; floats with 17 significant digits.

    The file is built in memory first so an unwritable path leaves nothing behind.
    """
    buf = io.StringIO()
    write_csv(buf, columns, rows, manifest)
    Path(path).write_text(buf.getvalue())


def read_csv(path: str | Path) -> tuple[list[str], list[str], list[dict]]:
    """Return (manifest lines, columns, rows); numeric cells become floats."""
    manifest, body = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            manifest.append(line[2:])
        elif line:
            body.append(line)
    reader = csv.reader(body)
    columns = next(reader)
    rows = []
    for rec in reader:
        row = {}
        for c, v in zip(columns, rec):
            try:
                row[c] = float(v)
            except ValueError:
                row[c] = v
        rows.append(row)
    return manifest, columns, rows


def format_table(columns: Sequence[str], rows: Sequence[Mapping], digits: int = 6) -> str:
    def fmt(v):
        if isinstance(v, (float, Fraction)) and not isinstance(v, bool):
            return f"{float(v):.{digits}g}"
        return str(v)

    cells = [[fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    out = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    out += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out)
