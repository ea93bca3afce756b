"""Static SVG charts rendered only from emitted data files.

Data files are small CSVs with a header line:

* bar:  ``label,value``
* line: ``x,y``
* heat: first row ``true\\pred,<col labels...>``, then one row per true label
"""

from __future__ import annotations

import csv
import os
from html import escape
from pathlib import Path
from typing import Sequence

from .errors import FormatError

W, H = 640, 400
MARGIN = 60


def write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path} is empty")
    return rows[0], rows[1:]


def _svg(body: list[str], title: str) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">'
    )
    parts = [head, f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    return "\n".join(parts + body + ["</svg>"]) + "\n"


def _axes() -> list[str]:
    return [
        f'<line x1="{MARGIN}" y1="{H - MARGIN}" x2="{W - 20}" y2="{H - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{H - MARGIN}" x2="{MARGIN}" y2="40" stroke="black"/>',
    ]


def bar_svg(labels: Sequence[str], values: Sequence[float], title: str) -> str:
    top = max([float(v) for v in values] + [1.0])
    plot_h = H - MARGIN - 40
    slot = (W - MARGIN - 20) / max(len(values), 1)
    body = _axes()
    for k, (lab, v) in enumerate(zip(labels, values)):
        h = plot_h * float(v) / top
        x = MARGIN + k * slot + slot * 0.1
        y = H - MARGIN - h
        body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{slot * 0.8:.2f}" height="{h:.2f}" fill="#4a78b0"/>')
        body.append(f'<text x="{x + slot * 0.4:.2f}" y="{y - 3:.2f}" text-anchor="middle">{escape(str(v))}</text>')
        body.append(
            f'<text x="{x + slot * 0.4:.2f}" y="{H - MARGIN + 14}" text-anchor="end" '
            f'transform="rotate(-45 {x + slot * 0.4:.2f} {H - MARGIN + 14})">{escape(lab)}</text>'
        )
    return _svg(body, title)


def line_svg(xs: Sequence[float], ys: Sequence[float], title: str) -> str:
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0
    plot_w, plot_h = W - MARGIN - 40, H - MARGIN - 40
    pts = [(MARGIN + 10 + plot_w * (x - x0) / span, H - MARGIN - plot_h * y) for x, y in zip(xs, ys)]
    body = _axes()
    for frac in (0.0, 0.5, 1.0):
        y = H - MARGIN - plot_h * frac
        body.append(f'<text x="{MARGIN - 6}" y="{y + 4:.2f}" text-anchor="end">{frac:.1f}</text>')
    body.append('<polyline fill="none" stroke="#b04a4a" stroke-width="2" points="'
                + " ".join(f"{px:.2f},{py:.2f}" for px, py in pts) + '"/>')
    for (px, py), x, y in zip(pts, xs, ys):
        body.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="#b04a4a"/>')
        body.append(f'<text x="{px:.2f}" y="{H - MARGIN + 14}" text-anchor="middle">{x:g}</text>')
        body.append(f'<text x="{px:.2f}" y="{py - 6:.2f}" text-anchor="middle">{y:.3f}</text>')
    return _svg(body, title)


def heat_svg(row_labels: Sequence[str], col_labels: Sequence[str], cells: Sequence[Sequence[float]], title: str) -> str:
    top = max([float(v) for row in cells for v in row] + [1.0])
    n_r, n_c = len(row_labels), len(col_labels)
    size = min((W - 2 * MARGIN) / max(n_c, 1), (H - MARGIN - 50) / max(n_r, 1))
    body = []
    for i, row in enumerate(cells):
        for j, v in enumerate(row):
            shade = int(255 - 200 * float(v) / top)
            x, y = MARGIN + j * size, 40 + i * size
            body.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{size:.2f}" height="{size:.2f}" '
                        f'fill="rgb({shade},{shade},255)" stroke="white"/>')
            body.append(f'<text x="{x + size / 2:.2f}" y="{y + size / 2 + 4:.2f}" text-anchor="middle">{escape(str(v))}</text>')
    for i, lab in enumerate(row_labels):
        body.append(f'<text x="{MARGIN - 6}" y="{40 + (i + 0.5) * size + 4:.2f}" text-anchor="end">{escape(lab)}</text>')
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{MARGIN + (j + 0.5) * size:.2f}" y="{40 + n_r * size + 14:.2f}" text-anchor="middle">{escape(lab)}</text>')
    return _svg(body, title)


def render_chart(kind: str, data_path: str | os.PathLike, svg_path: str | os.PathLike, title: str = "") -> str:
    """Render ``data_path`` to ``svg_path``; returns the SVG text."""
    header, rows = read_table(data_path)
    try:
        if kind == "bar":
            svg = bar_svg([r[0] for r in rows], [_num(r[1]) for r in rows], title)
        elif kind == "line":
            svg = line_svg([float(r[0]) for r in rows], [float(r[1]) for r in rows], title)
        elif kind == "heat":
            svg = heat_svg([r[0] for r in rows], header[1:], [[_num(v) for v in r[1:]] for r in rows], title)
        else:
            raise FormatError(f"unknown chart kind {kind!r}")
    except (IndexError, ValueError) as exc:
        raise FormatError(f"bad chart data in {data_path}: {exc}") from None
    Path(svg_path).write_text(svg)
    return svg


def _num(text: str):
    v = float(text)
    return int(v) if v.is_integer() and "." not in text and "e" not in text else v
