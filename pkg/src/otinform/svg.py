"""Minimal static SVG writers for heat maps and scatter plots."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

# tab10 palette, one color per categorical code (cycled past ten)
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _document(width: float, height: float, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(width)}" height="{_num(height)}" '
            f'viewBox="0 0 {_num(width)} {_num(height)}">')
    return "\n".join([head, f'<rect width="{_num(width)}" height="{_num(height)}" fill="#ffffff"/>',
                      *body, "</svg>"]) + "\n"


def _ramp(v: float) -> str:
    # white to dark blue
    r = round(255 - v * (255 - 8))
    g = round(255 - v * (255 - 48))
    b = round(255 - v * (255 - 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmaps(path, panels: list[tuple[str, np.ndarray]], cell_w: float = 2.0, cell_h: float = 8.0,
             gap: float = 30.0) -> None:
    """Side-by-side heat maps; each matrix is scaled by its own maximum."""
    top = 24.0
    body = []
    x0 = gap / 2
    height = 0.0
    for title, M in panels:
        M = np.asarray(M, dtype=np.float64)
        rows, cols = M.shape
        peak = M.max() if M.size and M.max() > 0 else 1.0
        body.append(f'<text x="{_num(x0)}" y="16" font-family="sans-serif" font-size="12">'
                    f"{escape(title)}</text>")
        body.append(f'<rect x="{_num(x0)}" y="{_num(top)}" width="{_num(cols * cell_w)}" '
                    f'height="{_num(rows * cell_h)}" fill="none" stroke="#999999"/>')
        for i, j in zip(*np.nonzero(M / peak >= 1e-3)):
            body.append(f'<rect x="{_num(x0 + j * cell_w)}" y="{_num(top + i * cell_h)}" '
                        f'width="{_num(cell_w)}" height="{_num(cell_h)}" fill="{_ramp(M[i, j] / peak)}"/>')
        x0 += cols * cell_w + gap
        height = max(height, top + rows * cell_h + gap / 2)
    Path(path).write_text(_document(x0 - gap / 2, height, body))


def scatter(path, points, labels=None, background=None, size: float = 480.0, title: str = "") -> None:
    """Scatter of ``points`` colored by integer ``labels`` over gray ``background`` points."""
    points = np.asarray(points, dtype=np.float64)
    frame = points if background is None else np.asarray(background, dtype=np.float64)
    lo, hi = frame.min(axis=0), frame.max(axis=0)
    pad = 0.15 * np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad, hi + pad
    margin, top = 10.0, 24.0

    def to_px(p):
        u = (p - lo) / (hi - lo)
        return margin + u[:, 0] * size, top + (1.0 - u[:, 1]) * size

    body = [f'<text x="{_num(margin)}" y="16" font-family="sans-serif" font-size="12">{escape(title)}</text>']
    if background is not None:
        bx, by = to_px(frame)
        body += [f'<circle cx="{_num(a)}" cy="{_num(b)}" r="1.20" fill="#cccccc"/>' for a, b in zip(bx, by)]
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    px, py = to_px(points)
    for k in np.nonzero(inside)[0]:
        color = PALETTE[int(labels[k]) % len(PALETTE)] if labels is not None else "#1f77b4"
        body.append(f'<circle cx="{_num(px[k])}" cy="{_num(py[k])}" r="1.50" fill="{color}" fill-opacity="0.7"/>')
    Path(path).write_text(_document(size + 2 * margin, size + top + margin, body))
