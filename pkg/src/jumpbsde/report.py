"""Deterministic report files: CSV and JSON with stable float formatting, plus
a minimal standalone SVG line plot.

Floats are written with ``repr`` (shortest round-tripping form), keys are
sorted, and columns follow a fixed order, so identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

CHECK_COLUMNS = ("check_name", "statistic", "tolerance", "pass")


def fmt(value) -> str:
    """Stable text form of one cell."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if value is None:
        return ""
    return str(value)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else fmt(v)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def csv_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Comma-separated text with a header; cells containing commas or quotes are quoted."""

    def cell(v):
        s = fmt(v)
        if any(c in s for c in ',"\n'):
            s = '"' + s.replace('"', '""') + '"'
        return s

    lines = [",".join(columns)]
    lines.extend(",".join(cell(r.get(c)) for c in columns) for r in rows)
    return "\n".join(lines) + "\n"


def report_render(results: Sequence[dict], out_dir, stem: str = "report", plot: dict | None = None) -> list[Path]:
    """Write ``<stem>.csv`` (check table), ``<stem>.json`` and optionally ``<stem>.svg``.

    ``results`` are check dicts with at least the :data:`CHECK_COLUMNS`; any
    additional keys go to the JSON only. ``plot`` is ``{"series": {label:
    (x, y)}, "title": ..., "logx": bool, "logy": bool}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    p = out / f"{stem}.csv"
    p.write_text(csv_text(results, CHECK_COLUMNS))
    files.append(p)
    p = out / f"{stem}.json"
    p.write_text(dumps_json({"checks": list(results), "all_pass": all(bool(r["pass"]) for r in results)}))
    files.append(p)
    if plot:
        p = out / f"{stem}.svg"
        p.write_text(svg_lines(**plot))
        files.append(p)
    return files


def write_table(rows: Sequence[dict], columns: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, columns))
    return path


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj))
    return path


# -- SVG ---------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_lines(series: dict, title: str = "", logx: bool = False, logy: bool = False, width: int = 480, height: int = 320) -> str:
    """Polyline plot of ``{label: (x, y)}`` as a standalone SVG document."""
    pad = 48
    tx = (lambda v: math.log10(v)) if logx else float
    ty = (lambda v: math.log10(abs(v))) if logy else float
    pts = {}
    for label in sorted(series):
        xs, ys = series[label]
        pairs = [(tx(x), ty(y)) for x, y in zip(xs, ys) if (not logx or x > 0) and (not logy or y != 0) and math.isfinite(float(y))]
        pts[label] = pairs
    allp = [p for v in pts.values() for p in v]
    if not allp:
        allp = [(0.0, 0.0), (1.0, 1.0)]
    x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
    y0, y1 = min(p[1] for p in allp), max(p[1] for p in allp)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{pad / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13">{_esc(title)}</text>',
        f'<text x="{pad}" y="{height - pad / 3:.1f}" font-family="sans-serif" font-size="10">{_tick(x0, logx)}</text>',
        f'<text x="{width - pad}" y="{height - pad / 3:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{_tick(x1, logx)}</text>',
        f'<text x="{pad - 4}" y="{height - pad:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{_tick(y0, logy)}</text>',
        f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{_tick(y1, logy)}</text>',
    ]
    for i, (label, pairs) in enumerate(pts.items()):
        color = _COLORS[i % len(_COLORS)]
        poly = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in pairs)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{poly}"/>')
        for a, b in pairs:
            out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{color}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * (i + 1)}" text-anchor="end" fill="{color}" font-family="sans-serif" font-size="11">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _tick(v: float, log: bool) -> str:
    return f"{10 ** v:.3g}" if log else f"{v:.3g}"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


H_COLUMNS = ("path", "time", "mark", "x_left", "tag", "H")
