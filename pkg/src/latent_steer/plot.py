"""Deterministic SVG rendering of anomaly curves.

One ``<path>`` per series (raw, smoothed) over frame index, y in [0, 1],
with labeled anomalous frame ranges drawn as shaded rectangles. Output
depends only on the input numbers, so identical curves give identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 800, 240
MARGIN = 36
SERIES_STYLE = {"raw": ("#9e9e9e", 1.0), "smooth": ("#c62828", 2.0)}


def _runs(labels: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of ones."""
    padded = np.concatenate([[0], (labels > 0).astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(series: dict[str, np.ndarray], labels: Optional[np.ndarray] = None,
               title: str = "") -> str:
    """SVG text for curves sharing one frame axis."""
    if not series:
        raise ValueError("nothing to plot")
    lengths = {len(v) for v in series.values()}
    if len(lengths) != 1 or 0 in lengths:
        raise ValueError("series must be non-empty and of equal length")
    n = lengths.pop()
    if labels is not None and len(labels) != n:
        raise ValueError("labels differ in length from the series")
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    span = max(n - 1, 1)

    def x(t):
        return MARGIN + plot_w * t / span

    def y(p):
        return MARGIN + plot_h * (1.0 - float(np.clip(p, 0.0, 1.0)))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<title>{escape(title)}</title>',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>']
    if labels is not None:
        for a, b in _runs(np.asarray(labels)):
            x0, x1 = x(a), x(min(b, n - 1)) if b > a + 1 else x(a) + plot_w / span
            out.append(f'<rect class="ground-truth" x="{_fmt(x0)}" y="{MARGIN}" '
                       f'width="{_fmt(max(x1 - x0, 1.0))}" height="{plot_h}" '
                       f'fill="#ffcdd2" fill-opacity="0.6"/>')
    out.append(f'<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" '
               f'fill="none" stroke="#000000" stroke-width="1"/>')
    for tick in (0.0, 0.5, 1.0):
        out.append(f'<text x="{MARGIN - 6}" y="{_fmt(y(tick) + 4)}" font-size="10" '
                   f'text-anchor="end">{tick:.1f}</text>')
    out.append(f'<text x="{WIDTH - MARGIN}" y="{HEIGHT - 10}" font-size="10" '
               f'text-anchor="end">frame {n - 1}</text>')
    for name in sorted(series):
        values = np.asarray(series[name], np.float64)
        colour, width = SERIES_STYLE.get(name, ("#1565c0", 1.5))
        d = "M" + " L".join(f"{_fmt(x(t))},{_fmt(y(v))}" for t, v in enumerate(values))
        out.append(f'<path class="series" data-series="{escape(name)}" d="{d}" fill="none" '
                   f'stroke="{colour}" stroke-width="{width}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(curve, path, title: Optional[str] = None) -> Path:
    """Render an ``AnomalyCurve`` or a dict as returned by ``read_curve_csv``."""
    if isinstance(curve, dict):
        series = {"raw": curve["raw"], "smooth": curve["smooth"]}
        labels = curve.get("label")
        title = title if title is not None else ""
    else:
        series = {"raw": curve.frame_raw, "smooth": curve.frame_smooth}
        labels = curve.frame_labels
        title = title if title is not None else curve.video_id
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(series, labels, title))
    return path
