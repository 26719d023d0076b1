"""Run traces: CSV with a schema header, pointwise comparison, and SVG line plots."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA = 1


class TraceFormatError(ValueError):
    pass


@dataclass
class Trace:
    """Rows of named scalars logged over training time ``s``."""

    rows: list[dict[str, float]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def append(self, row: dict[str, float]) -> None:
        self.rows.append(dict(row))

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for lead in ("s", "pmse", "pmse_stderr"):
            if any(lead in r for r in self.rows):
                cols.append(lead)
        for r in self.rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        return cols

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        extra = "".join(f" {k}={v}" for k, v in self.meta.items())
        buf.write(f"# schema={SCHEMA}{extra}\n")
        cols = self.columns
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([repr(float(r.get(c, math.nan))) for c in cols])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "Trace":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise TraceFormatError(f"{path}: missing '# schema=' header")
        meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("#").split() if "=" in kv)
        if meta.pop("schema", None) != str(SCHEMA):
            raise TraceFormatError(f"{path}: unsupported trace schema")
        reader = csv.reader(lines[1:])
        try:
            cols = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: no column header") from None
        rows = []
        for i, rec in enumerate(reader):
            if len(rec) != len(cols):
                raise TraceFormatError(f"{path}: row {i} has {len(rec)} fields, expected {len(cols)}")
            rows.append({c: float(v) for c, v in zip(cols, rec)})
        return cls(rows, meta)


def compare_traces(
    a: Trace,
    b: Trace,
    column: str = "pmse",
    s_min: float = 0.0,
    s_max: float = math.inf,
    column_b: str | None = None,
):
    """Relative deviation of ``b`` from ``a`` at the times of ``a``.

    ``b`` is interpolated linearly in log-time.  ``column_b`` names the column
    of ``b`` when it differs from ``column``.  Returns (s, rel_dev) arrays
    restricted to [s_min, s_max].
    """
    sa, ya = a.column("s"), a.column(column)
    sb, yb = b.column("s"), b.column(column_b or column)
    keep = (sa >= s_min) & (sa <= s_max) & (sa >= sb.min()) & (sa <= sb.max())
    sa, ya = sa[keep], ya[keep]
    pos = sb > 0
    if np.all(sa > 0) and pos.sum() >= 2:
        yb_at = np.interp(np.log(sa), np.log(sb[pos]), yb[pos])
    else:
        yb_at = np.interp(sa, sb, yb)
    diff = np.abs(yb_at - ya)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff == 0, 0.0, diff / np.abs(ya))
    return sa, rel


# ---------------------------------------------------------------------------
# SVG

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


def _ticks(lo: float, hi: float, log: bool) -> list[float]:
    if log:
        return [10.0**e for e in range(math.floor(lo), math.ceil(hi) + 1)]
    span = hi - lo or 1.0
    step = 10 ** math.floor(math.log10(span / 4))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= 6:
            step *= mult
            break
    first = math.ceil(lo / step) * step
    return [first + i * step for i in range(int((hi - first) / step) + 1)]


def svg_plot(
    series: list[tuple[str, np.ndarray, np.ndarray]],
    *,
    title: str = "",
    xlabel: str = "s",
    ylabel: str = "pmse",
    logx: bool = True,
    logy: bool = True,
    hlines: list[tuple[str, float]] | None = None,
    width: int = 640,
    height: int = 420,
) -> str:
    """Line plot of (label, x, y) series as a standalone SVG document."""
    hlines = hlines or []
    L, R, T, B = 70, 20, 30, 50
    pw, ph = width - L - R, height - T - B

    def tx(v, log):
        return np.log10(v) if log else v

    xs, ys = [], []
    for _, x, y in series:
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        xs.append(tx(x[ok], logx))
        ys.append(tx(y[ok], logy))
    yh = [tx(v, logy) for _, v in hlines if (v > 0 or not logy)]
    allx = np.concatenate(xs) if xs else np.array([0.0, 1.0])
    ally = np.concatenate(ys + [np.array(yh)]) if ys else np.array([0.0, 1.0])
    if allx.size == 0:
        allx = np.array([0.0, 1.0])
    if ally.size == 0:
        ally = np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return L + (v - x0) / (x1 - x0) * pw

    def py(v):
        return T + ph - (v - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1, logx):
        v = tx(t, logx)
        if x0 <= v <= x1:
            out.append(f'<line x1="{px(v):.1f}" y1="{T + ph}" x2="{px(v):.1f}" y2="{T + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{px(v):.1f}" y="{T + ph + 18}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1, logy):
        v = tx(t, logy)
        if y0 <= v <= y1:
            out.append(f'<line x1="{L - 5}" y1="{py(v):.1f}" x2="{L}" y2="{py(v):.1f}" stroke="black"/>')
            out.append(f'<text x="{L - 8}" y="{py(v) + 4:.1f}" text-anchor="end">{t:g}</text>')
    for label, v in hlines:
        if logy and v <= 0:
            continue
        yv = py(tx(v, logy))
        out.append(
            f'<line x1="{L}" y1="{yv:.1f}" x2="{L + pw}" y2="{yv:.1f}" stroke="#999" stroke-dasharray="4,3"/>'
        )
        out.append(f'<text x="{L + pw - 4}" y="{yv - 3:.1f}" text-anchor="end" fill="#666">{label}</text>')
    for i, ((label, _, _), x, y) in enumerate(zip(series, xs, ys)):
        color = _PALETTE[i % len(_PALETTE)]
        if x.size:
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{L + 10}" y="{T + 16 + 15 * i}" fill="{color}">{label}</text>')
    out.append(f'<text x="{L + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    out.append(
        f'<text x="16" y="{T + ph / 2}" text-anchor="middle" transform="rotate(-90 16 {T + ph / 2})">{ylabel}</text>'
    )
    if title:
        out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-weight="bold">{title}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
