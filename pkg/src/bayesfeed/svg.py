"""Dependency-free SVG heatmaps of raster values."""

from __future__ import annotations

import numpy as np

# a perceptually ordered blue-to-yellow ramp
_RAMP = np.array(
    [
        [68, 1, 84],
        [59, 82, 139],
        [33, 145, 140],
        [94, 201, 98],
        [253, 231, 37],
    ],
    dtype=float,
)
_DIVERGING = np.array([[33, 102, 172], [247, 247, 247], [178, 24, 43]], dtype=float)


def _colors(values, ramp, lo, hi):
    t = np.clip((values - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)
    pos = t * (len(ramp) - 1)
    i = np.minimum(pos.astype(int), len(ramp) - 2)
    f = (pos - i)[:, None]
    rgb = ramp[i] * (1 - f) + ramp[i + 1] * f
    return ["#%02x%02x%02x" % tuple(int(round(c)) for c in row) for row in rgb]


def heatmap_svg(values, grid_n: int, title: str = "", diverging: bool = False, cell_px: int = 8) -> str:
    """Render row-major raster values (row 0 at the bottom) as an SVG document."""
    v = np.asarray(values, dtype=float)
    if diverging:
        m = float(np.max(np.abs(v))) or 1.0
        lo, hi, ramp = -m, m, _DIVERGING
    else:
        lo, hi, ramp = float(v.min()), float(v.max()), _RAMP
    cols = _colors(v, ramp, lo, hi)
    size = grid_n * cell_px
    top = 24
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + top + 20}" '
        f'viewBox="0 0 {size} {size + top + 20}" shape-rendering="crispEdges">',
        f'<text x="2" y="16" font-family="sans-serif" font-size="13">{title}</text>',
    ]
    for k, c in enumerate(cols):
        row, col = divmod(k, grid_n)
        y = top + (grid_n - 1 - row) * cell_px
        out.append(f'<rect x="{col * cell_px}" y="{y}" width="{cell_px}" height="{cell_px}" fill="{c}"/>')
    out.append(
        f'<text x="2" y="{size + top + 15}" font-family="sans-serif" font-size="11">'
        f"min {lo:.3g}  max {hi:.3g}</text>"
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap(path, values, grid_n: int, title: str = "", diverging: bool = False) -> None:
    with open(path, "w") as fh:
        fh.write(heatmap_svg(values, grid_n, title, diverging))
