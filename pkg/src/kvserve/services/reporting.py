"""Run report serialization (JSON, versioned CSV) and the aligned console table."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from ...project_meta import get_app_meta
from ..schemas.report import COMP_LABEL, STEP_LABELS, WAIT_LABEL, RunReport

CSV_FORMAT = "report_v1"

_METRIC_COLUMNS = (
    "avg_latency_ms",
    "total_ms",
    "gpu_hit_ratio",
    "total_hit_ratio",
    "tokens_processed",
    "evictions",
    "tail_tokens_lost",
    "peak_occupancy",
    "offload_tasks",
    "offload_rejections",
    "speedup_vs_recompute",
    "speedup_vs_gpu_only",
)
CSV_COLUMNS = (
    CSV_FORMAT,
    "mode",
    "batch_size",
    "chunk_size",
    "device_pages",
    "num_requests",
    "num_batches",
    *STEP_LABELS,
    WAIT_LABEL,
    COMP_LABEL,
    *_METRIC_COLUMNS,
)
TABLE_ROWS = (*STEP_LABELS, WAIT_LABEL, COMP_LABEL, *_METRIC_COLUMNS)


class ReportFormatError(ValueError):
    pass


def _render_json(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False)


def report_payload(reports: Sequence[RunReport]) -> dict[str, Any]:
    return {
        "tool": get_app_meta().tool_label,
        "reports": [report.model_dump(mode="json") for report in reports],
    }


def report_to_json(reports: Sequence[RunReport]) -> str:
    return _render_json(report_payload(reports)) + "\n"


def _cell(value: Any) -> str:
    return "" if value is None else str(value)


def csv_row(report: RunReport, label: str = "run") -> dict[str, str]:
    row = {
        CSV_FORMAT: label,
        "mode": report.mode,
        "batch_size": str(report.batch_size),
        "chunk_size": str(report.chunk_size),
        "device_pages": str(report.device_pages),
        "num_requests": str(report.num_requests),
        "num_batches": str(report.num_batches),
    }
    for step in STEP_LABELS:
        row[step] = _cell(report.steps_ms.get(step))
    row[WAIT_LABEL] = _cell(report.wait_ms)
    row[COMP_LABEL] = _cell(report.comp_ms)
    for column in _METRIC_COLUMNS:
        row[column] = _cell(getattr(report, column))
    return row


def reports_to_csv(reports: Sequence[RunReport], labels: Sequence[str] | None = None) -> str:
    labels = labels or ["run"] * len(reports)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report, label in zip(reports, labels):
        writer.writerow(csv_row(report, label))
    return buffer.getvalue()


def write_outputs(
    out_path: str | Path, reports: Sequence[RunReport], labels: Sequence[str] | None = None
) -> tuple[Path, Path]:
    """Write ``<out>.json`` and ``<out>.csv``; a suffix on ``out_path`` is replaced."""
    base = Path(out_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    json_path = base.with_suffix(".json")
    csv_path = base.with_suffix(".csv")
    json_path.write_text(report_to_json(reports), encoding="utf-8")
    csv_path.write_text(reports_to_csv(reports, labels), encoding="utf-8")
    return json_path, csv_path


def load_columns(path: str | Path) -> list[tuple[str, dict[str, str]]]:
    """Read a run JSON or a run/sweep CSV as ``(column title, metric -> value)`` pairs."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportFormatError(f"no se puede leer el informe {path}: {exc.strerror}") from exc
    if path.suffix == ".json":
        return _columns_from_json(text, path)
    return _columns_from_csv(text, path)


def _columns_from_json(text: str, path: Path) -> list[tuple[str, dict[str, str]]]:
    try:
        data = json.loads(text)
        reports = [RunReport.model_validate(item) for item in data["reports"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
        raise ReportFormatError(f"{path}: no es un informe de ejecución válido") from exc
    return [(report.mode, csv_row(report)) for report in reports]


def _columns_from_csv(text: str, path: Path) -> list[tuple[str, dict[str, str]]]:
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames or reader.fieldnames[0] != CSV_FORMAT:
        raise ReportFormatError(
            f"{path}: cabecera CSV desconocida; se esperaba la versión {CSV_FORMAT}"
        )
    columns = []
    for row in reader:
        label = row[CSV_FORMAT]
        title = row["mode"] if label == "run" else f"{row['mode']} {label}"
        columns.append((title, row))
    return columns


def render_table(columns: Sequence[tuple[str, dict[str, str]]]) -> str:
    header = ["Metric", *(title for title, _ in columns)]
    body = [[name, *(values.get(name, "") for _, values in columns)] for name in TABLE_ROWS]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = []
    for index, row in enumerate([header, *body]):
        cells = [row[0].ljust(widths[0])] + [
            cell.rjust(width) for cell, width in zip(row[1:], widths[1:])
        ]
        lines.append("  ".join(cells).rstrip())
        if index == 0:
            lines.append("  ".join("-" * width for width in widths))
    return "\n".join(lines)
