"""Report serialization: canonical JSON, plain-text tables, and CSV.

Writers are byte-deterministic: key order, float formatting, and newlines
are all fixed, so identical report dicts serialize to identical files.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Sequence

from . import __version__


def embed_provenance(report: dict, config: dict, seed: int) -> dict:
    """Attach the resolved configuration, seed, and code version to a report."""
    out = dict(report)
    out["provenance"] = {"version": __version__, "seed": seed, "config": config}
    return out


def fmt(value: Any, decimals: int = 4) -> str:
    """Fixed-width cell rendering: floats to ``decimals`` places, rest as str."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.{decimals}f}"
    return str(value)


def render_table(headers: Sequence[str], rows: Sequence[Sequence[Any]],
                 title: str | None = None) -> str:
    """Fixed-width plain-text table with a header rule."""
    cells = [[fmt(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        if len(row) != len(headers):
            raise ValueError("row width does not match headers")
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip())
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines)


def _null_non_finite(value: Any) -> Any:
    """Strict JSON has no NaN/inf; degenerate statistics serialize as null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _null_non_finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_null_non_finite(v) for v in value]
    return value


def write_json_report(path: str | Path, report: dict) -> Path:
    path = Path(path)
    payload = json.dumps(_null_non_finite(report), sort_keys=True,
                         indent=2, allow_nan=False)
    path.write_text(payload + "\n", encoding="utf-8")
    return path


def write_text_report(path: str | Path, sections: Sequence[str]) -> Path:
    """Join pre-rendered text sections with blank lines."""
    path = Path(path)
    path.write_text("\n\n".join(s.rstrip() for s in sections) + "\n", encoding="utf-8")
    return path


def write_csv(path: str | Path, headers: Sequence[str],
              rows: Sequence[Sequence[Any]]) -> Path:
    """Comma-separated values; floats keep full repr precision."""
    def cell(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(headers)]
    for row in rows:
        if len(row) != len(headers):
            raise ValueError("row width does not match headers")
        lines.append(",".join(cell(v) for v in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def provenance_lines(report: dict) -> str:
    """Render the provenance block for the text report."""
    prov = report.get("provenance", {})
    lines = [f"version: {prov.get('version', '?')}", f"seed: {prov.get('seed', '?')}"]
    config = prov.get("config", {})
    for section in sorted(config):
        pairs = "  ".join(f"{k}={v}" for k, v in sorted(config[section].items()))
        lines.append(f"[{section}] {pairs}")
    return "\n".join(lines)
