"""
Rendering of command reports: deterministic JSON or an aligned plain-text table.
"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

from model.errors import IoFailure
from utils.logger import setup_logger

logger = setup_logger(__name__)

REPORT_COLUMNS = ["i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "rsum"]


def to_json(report: Dict[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def format_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    """Right-aligned columns with a header rule."""
    cells = [[_cell(row.get(c)) for c in columns] for row in rows]
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    header = "  ".join(c.rjust(w) for c, w in zip(columns, widths))
    lines = [header, "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines) + "\n"


def _flatten_rows(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    flat = []
    for row in rows:
        merged = {k: v for k, v in row.items() if k != "report"}
        merged.update(row.get("report") or {})
        flat.append(merged)
    return flat


def format_text(report: Dict[str, Any]) -> str:
    """
    Plain-text rendering: scalar fields as 'key: value' lines, a retrieval
    report as a one-row table and a list of rows as a table.
    """
    lines = []
    for key in sorted(report):
        value = report[key]
        if key in ("report", "rows") or isinstance(value, (dict, list)):
            continue
        lines.append(f"{key}: {_cell(value)}")
    text = "\n".join(lines) + ("\n" if lines else "")

    if isinstance(report.get("report"), dict):
        text += format_table([report["report"]], REPORT_COLUMNS)
    if isinstance(report.get("rows"), list) and report["rows"]:
        rows = _flatten_rows(report["rows"])
        columns = list(dict.fromkeys(k for row in rows for k in row if not isinstance(row[k], (dict, list))))
        text += format_table(rows, columns)
    for key in sorted(report):
        value = report[key]
        if key not in ("report", "rows") and isinstance(value, (dict, list)):
            text += f"{key}: {json.dumps(value, sort_keys=True)}\n"
    return text


class ReportView:
    """Writes reports to stdout and, optionally, to a file."""

    def __init__(self, as_json: bool = False, stream: Optional[TextIO] = None):
        self.as_json = as_json
        self.stream = stream if stream is not None else sys.stdout

    def render(self, report: Dict[str, Any]) -> str:
        return to_json(report) if self.as_json else format_text(report)

    def show(self, report: Dict[str, Any], out_path: Optional[Path] = None) -> None:
        self.stream.write(self.render(report))
        self.stream.flush()
        if out_path is not None:
            self.save(report, out_path)

    def save(self, report: Dict[str, Any], out_path: Path) -> None:
        """Always saves JSON, whatever the console format."""
        out_path = Path(out_path)
        try:
            out_path.parent.mkdir(parents=True, exist_ok=True)
            out_path.write_text(to_json(report), encoding="utf-8")
        except OSError as e:
            logger.error(f"Could not write report {out_path}: {e}")
            raise IoFailure(f"cannot write report {out_path}: {e}") from e
        logger.info(f"Report written: {out_path}")

    def show_error(self, name: str, message: str, stream: Optional[TextIO] = None) -> None:
        (stream or sys.stderr).write(f"{name}: {message}\n")
