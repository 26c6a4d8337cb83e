"""Bird's-eye-view SVG plots of scenes and detections."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .geometry import Box3D, bev_footprint

SCALE = 8.0  # pixels per meter
POINT_COLOR = "#a0a0a0"
GT_COLOR = "#606060"


def order_color(i: int, n: int) -> str:
    """Linear RGB ramp from magenta (first) to blue (last)."""
    t = 0.0 if n <= 1 else i / (n - 1)
    return f"rgb({round(255 * (1 - t))},0,255)"


def _poly(box: Box3D, tx, ty) -> str:
    fp = bev_footprint(box)
    return " ".join(f"{tx(x):.2f},{ty(y):.2f}" for x, y in fp)


def render_svg(
    points: np.ndarray | None,
    gt: Sequence[Box3D] = (),
    preds: Sequence[Box3D] = (),
    title: str = "",
    max_points: int = 20000,
) -> str:
    pts = np.zeros((0, 4)) if points is None else np.asarray(points, dtype=float).reshape(-1, 4)
    if len(pts) > max_points:
        pts = pts[np.linspace(0, len(pts) - 1, max_points).astype(int)]
    extent = 10.0
    for b in list(gt) + list(preds):
        extent = max(extent, abs(b.x) + max(b.l, b.w), abs(b.y) + max(b.l, b.w))
    if len(pts):
        extent = max(extent, float(np.abs(pts[:, :2]).max()))
    extent = float(np.ceil(extent + 1.0))
    size = 2 * extent * SCALE

    def tx(x):
        return (x + extent) * SCALE

    def ty(y):
        return (extent - y) * SCALE  # +y points up

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" "http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size:.0f}" height="{size:.0f}" '
        f'viewBox="0 0 {size:.0f} {size:.0f}">',
        f"<title>{escape(title or 'bev')}</title>",
        f'<rect x="0" y="0" width="{size:.0f}" height="{size:.0f}" fill="white"/>',
        f'<circle cx="{tx(0):.2f}" cy="{ty(0):.2f}" r="3" fill="black"/>',
        f'<g fill="{POINT_COLOR}">',
    ]
    out += [f'<circle cx="{tx(x):.2f}" cy="{ty(y):.2f}" r="0.7"/>' for x, y in pts[:, :2]]
    out.append("</g>")
    out.append(f'<g fill="none" stroke="{GT_COLOR}" stroke-width="1.5">')
    out += [f'<polygon points="{_poly(b, tx, ty)}"/>' for b in gt]
    out.append("</g>")
    out.append('<g fill="none" stroke-width="2">')
    for i, b in enumerate(preds):
        c = order_color(i, len(preds))
        hx = b.x + 0.5 * b.l * np.cos(b.yaw)
        hy = b.y + 0.5 * b.l * np.sin(b.yaw)
        out.append(f'<polygon points="{_poly(b, tx, ty)}" stroke="{c}"/>')
        out.append(f'<line x1="{tx(b.x):.2f}" y1="{ty(b.y):.2f}" x2="{tx(hx):.2f}" y2="{ty(hy):.2f}" stroke="{c}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
