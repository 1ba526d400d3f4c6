"""CSV, aligned-text and minimal SVG outputs for training curves and sweeps."""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def text_table(rows: list[dict], columns: list[str], precision: int = 4) -> str:
    def fmt(v):
        return f"{v:.{precision}f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def line_chart_svg(series: dict[str, tuple[list[float], list[float]]], title: str = "",
                   width: int = 480, height: int = 300) -> str:
    """One SVG line chart; each series is scaled to its own [min, max] range.

    Series have different units (loss vs AP), so the y axis carries no ticks;
    the legend gives each series' range instead.
    """
    pad_l, pad_r, pad_t, pad_b = 40, 20, 30, 40
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    xs_all = [x for xs, _ in series.values() for x in xs]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    x_span = (x_hi - x_lo) or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
             f'<text x="{pad_l}" y="{height - 8}" font-size="11">{x_lo:g}</text>',
             f'<text x="{pad_l + pw}" y="{height - 8}" font-size="11" text-anchor="end">{x_hi:g}</text>']
    for k, (name, (xs, ys)) in enumerate(series.items()):
        if not ys:
            continue
        color = _COLORS[k % len(_COLORS)]
        y_lo, y_hi = min(ys), max(ys)
        y_span = (y_hi - y_lo) or 1.0
        pts = " ".join(f"{pad_l + (x - x_lo) / x_span * pw:.1f},{pad_t + ph - (y - y_lo) / y_span * ph:.1f}"
                       for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad_l + 8}" y="{pad_t + 14 + 14 * k}" font-size="11" fill="{color}">'
                     f'{escape(name)} [{y_lo:.3g}, {y_hi:.3g}]</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
