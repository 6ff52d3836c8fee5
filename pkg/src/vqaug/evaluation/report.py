"""Gain tables: mean (std) of the relative gain per method and dataset, with reliability marks."""
from __future__ import annotations

import csv
from pathlib import Path

from .metrics import mark
from .trials import TrialResult

Cell = TrialResult | tuple[float, float] | None


def _cell(v: Cell) -> tuple[float | None, float | None]:
    if v is None:
        return None, None
    if isinstance(v, TrialResult):
        return v.percent()
    return float(v[0]), float(v[1])


def format_cell(v: Cell) -> str:
    m, s = _cell(v)
    if m is None:
        return "×"
    return f"{m:.2f}({s:.2f}){mark(m, s)}"


def gain_table(results: dict[str, dict[str, Cell]], columns: list[str] | None = None) -> str:
    """Plain-text table, one row per method and one column per dataset."""
    columns = columns or sorted({c for row in results.values() for c in row})
    rows = [["method", *columns]]
    for method, row in results.items():
        rows.append([method, *(format_cell(row.get(c)) for c in columns)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_gain_csv(results: dict[str, dict[str, Cell]], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "dataset", "mean_gain_pct", "std_gain_pct", "mark"])
        for method, row in results.items():
            for ds, v in row.items():
                m, s = _cell(v)
                w.writerow([method, ds, "" if m is None else repr(m), "" if s is None else repr(s), mark(m, s)])
