"""Per-language result tables: aligned text, TSV and markdown renderings."""

import csv
import io
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from crossfact.core import CrossFactError, DataError

logger = logging.getLogger(__name__)

AVG_COLUMN = "Avg"
FAILED = "FAILED"
MISSING = "-"


class TableRow(BaseModel):
    name: str
    values: Dict[str, float] = Field(default_factory=dict)
    failed: bool = False
    error: Optional[str] = None

    @property
    def average(self) -> Optional[float]:
        if self.failed or not self.values:
            return None
        return float(np.mean(list(self.values.values())))


class ResultTable(BaseModel):
    """Rows of percentage scores keyed by language, with a macro-average column."""

    title: str
    languages: List[str]
    rows: List[TableRow] = Field(default_factory=list)

    def add(self, name: str, values: Mapping[str, float], scale: float = 100.0) -> TableRow:
        row = TableRow(name=name, values={lang: scale * float(v) for lang, v in values.items()})
        self.rows.append(row)
        return row

    def add_failed(self, name: str, error: str) -> TableRow:
        row = TableRow(name=name, failed=True, error=error)
        self.rows.append(row)
        return row

    @property
    def columns(self) -> List[str]:
        return [*self.languages, AVG_COLUMN]

    def cell(self, row: TableRow, column: str) -> Optional[float]:
        if column == AVG_COLUMN:
            return row.average
        return row.values.get(column)


def _fmt(row: TableRow, value: Optional[float], precise: bool) -> str:
    if row.failed:
        return FAILED
    if value is None:
        return MISSING
    return repr(value) if precise else f"{value:.1f}"


def _cells(table: ResultTable, row: TableRow, precise: bool) -> List[str]:
    return [_fmt(row, table.cell(row, col), precise) for col in table.columns]


def render_text(table: ResultTable) -> str:
    """Aligned text with one decimal per cell."""
    header = ["", *table.columns]
    body = [[row.name, *_cells(table, row, precise=False)] for row in table.rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    lines = [table.title]
    for line in [header, *body]:
        first = line[0].ljust(widths[0])
        rest = [cell.rjust(width) for cell, width in zip(line[1:], widths[1:])]
        lines.append("  ".join([first, *rest]).rstrip())
    return "\n".join(lines) + "\n"


def render_tsv(table: ResultTable) -> str:
    """Full-precision TSV; the printed text table is this rounded to one decimal."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, delimiter="\t", lineterminator="\n")
    writer.writerow(["row", *table.columns])
    for row in table.rows:
        writer.writerow([row.name, *_cells(table, row, precise=True)])
    return buffer.getvalue()


def write_tsv(table: ResultTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_tsv(table), encoding="utf-8")
    except OSError as e:
        raise CrossFactError(f"cannot write table {path}: {e}", error_code="unwritable") from e
    return path


def parse_tsv(text: str, title: str = "") -> ResultTable:
    """Inverse of ``render_tsv``; the Avg column is recomputed, not stored."""
    rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
    if not rows or rows[0][:1] != ["row"] or rows[0][-1:] != [AVG_COLUMN]:
        raise DataError("not a result table: missing header", error_code="bad_table")
    languages = rows[0][1:-1]
    table = ResultTable(title=title, languages=languages)
    for line_no, line in enumerate(rows[1:], start=2):
        if len(line) != len(languages) + 2:
            raise DataError(f"line {line_no}: expected {len(languages) + 2} cells, got {len(line)}", error_code="bad_table")
        if FAILED in line[1:]:
            table.rows.append(TableRow(name=line[0], failed=True))
            continue
        values = {lang: float(cell) for lang, cell in zip(languages, line[1:-1]) if cell != MISSING}
        table.rows.append(TableRow(name=line[0], values=values))
    return table


def read_tsv(path: Union[str, Path], title: str = "") -> ResultTable:
    return parse_tsv(Path(path).read_text(encoding="utf-8"), title)


def render_markdown(tables: Iterable[ResultTable], heading: str, notes: Iterable[str] = ()) -> str:
    out = [f"# {heading}", ""]
    for note in notes:
        out.append(f"- {note}")
    for table in tables:
        out += ["", f"## {table.title}", ""]
        out.append("| | " + " | ".join(table.columns) + " |")
        out.append("|---" * (len(table.columns) + 1) + "|")
        for row in table.rows:
            out.append(f"| {row.name} | " + " | ".join(_cells(table, row, precise=False)) + " |")
        failures = [row for row in table.rows if row.failed and row.error]
        if failures:
            out.append("")
            out += [f"- {row.name}: {row.error}" for row in failures]
    return "\n".join(out) + "\n"
