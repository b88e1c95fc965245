"""Report formatters: delimited text with a metadata header, JSON, plain text"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .errors import DataError, ManifestError

HEADER_PREFIX = "# "


@dataclass
class Report:
    """One subcommand's result: metadata, table rows and free-text notes"""
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    rows: List[Dict[str, Any]] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        seen: List[str] = []
        for row in self.rows:
            for key in row:
                if key not in seen:
                    seen.append(key)
        return seen

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "metadata": self.metadata,
                "rows": self.rows, "notes": self.notes}


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return str(value)
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def _json_default(value: Any):
    # numpy scalars and arrays
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


class ReportRenderer:
    """Render a report in various formats"""

    def __init__(self, report: Report):
        self.report = report

    def to_tsv(self) -> str:
        """
        Metadata header lines (`# key: value`) followed by a tab-separated
        table. The `# command:` and `# config:` lines are enough to replay the run.
        """
        report = self.report
        lines = [f"{HEADER_PREFIX}command: {report.command}",
                 f"{HEADER_PREFIX}config: {json.dumps(report.config, sort_keys=True, default=_json_default)}"]
        for key, value in report.metadata.items():
            lines.append(f"{HEADER_PREFIX}{key}: {format_value(value)}")
        for note in report.notes:
            lines.append(f"{HEADER_PREFIX}note: {note}")

        columns = report.columns
        if columns:
            lines.append("\t".join(columns))
            for row in report.rows:
                lines.append("\t".join(format_value(row.get(c)) for c in columns))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.report.to_dict(), indent=2, default=_json_default)

    def to_text(self) -> str:
        """Human-readable aligned table"""
        report = self.report
        lines = [f"pixelveil {report.command}", "=" * 50, ""]
        for key, value in report.metadata.items():
            lines.append(f"{key}: {format_value(value)}")
        if report.metadata:
            lines.append("")

        columns = report.columns
        if columns:
            cells = [[format_value(row.get(c)) for c in columns] for row in report.rows]
            widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
            lines.append("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
            lines.append("  ".join("-" * w for w in widths))
            for r in cells:
                lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
            lines.append("")

        for note in report.notes:
            lines.append(f"Note: {note}")
        return "\n".join(lines).rstrip() + "\n"

    def save(self, output_path: Path) -> None:
        """Write JSON for a .json path, the delimited report otherwise"""
        content = self.to_json() if output_path.suffix.lower() == ".json" else self.to_tsv()
        try:
            output_path.write_text(content)
        except OSError as e:
            raise DataError(f"cannot write report {output_path}: {e}") from e


def read_report_header(path: Union[str, Path]) -> Tuple[str, Dict[str, Any]]:
    """(command, config) recorded in a saved report, JSON or delimited"""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"cannot read report {path}: {e}") from e

    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
            return data["command"], data.get("config", {})
        except (json.JSONDecodeError, KeyError) as e:
            raise ManifestError(f"malformed report {path}: {e}") from e

    command: Optional[str] = None
    config: Dict[str, Any] = {}
    for line in text.splitlines():
        if not line.startswith(HEADER_PREFIX):
            break
        key, _, value = line[len(HEADER_PREFIX):].partition(": ")
        if key == "command":
            command = value.strip()
        elif key == "config":
            try:
                config = json.loads(value)
            except json.JSONDecodeError as e:
                raise ManifestError(f"malformed config echo in {path}: {e}", field="config") from e
    if command is None:
        raise ManifestError(f"{path} has no '# command:' header", field="command")
    return command, config
