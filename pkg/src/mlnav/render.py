"""Static SVG drive renderings: hillshaded terrain, driven path, rejected candidates, goal."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .terrain import Heightmap

MAX_RASTER = 100  # rectangles per side in the hillshade layer
PX_PER_M = 30.0


def hillshade(heights: np.ndarray, resolution: float, azimuth: float = 315.0, altitude: float = 45.0) -> np.ndarray:
    """Lambertian shading in [0, 1] for a light at the given azimuth/altitude (degrees)."""
    dzdy, dzdx = np.gradient(heights, resolution)
    slope = np.arctan(np.hypot(dzdx, dzdy))
    aspect = np.arctan2(-dzdx, dzdy)
    az, alt = math.radians(azimuth), math.radians(altitude)
    shade = math.sin(alt) * np.cos(slope) + math.cos(alt) * np.sin(slope) * np.cos(az - aspect)
    return np.clip(shade, 0.0, 1.0)


def _block_mean(a: np.ndarray, n: int) -> np.ndarray:
    rows, cols = a.shape
    ri = np.linspace(0, rows, n + 1).astype(int)
    ci = np.linspace(0, cols, n + 1).astype(int)
    return np.array([[a[ri[i] : ri[i + 1], ci[j] : ci[j + 1]].mean() for j in range(n)] for i in range(n)])


def _points(path, to_px) -> str:
    return " ".join(f"{px:.2f},{py:.2f}" for px, py in (to_px(x, y) for x, y in path))


def render_svg(hm: Heightmap, trace: dict, out_path) -> Path:
    """Write an SVG of a drive trace.

    ``trace`` holds ``goal`` (x, y), optional ``goal_tolerance``, ``start`` and
    ``cycles``, each with an ``executed`` point list and ``rejected`` paths.
    """
    x0, x1, y0, y1 = hm.bounds
    half = hm.resolution / 2
    x0, x1, y0, y1 = x0 - half, x1 + half, y0 - half, y1 + half
    width, height = (x1 - x0) * PX_PER_M, (y1 - y0) * PX_PER_M

    def to_px(x, y):
        return (x - x0) * PX_PER_M, (y1 - y) * PX_PER_M

    n = min(MAX_RASTER, hm.height_cells, hm.width_cells)
    shade = _block_mean(hillshade(hm.heights, hm.resolution), n)
    cw, ch = width / n, height / n
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.2f} {height:.2f}">',
        '<g id="terrain" shape-rendering="crispEdges">',
    ]
    for i in range(n):
        for j in range(n):
            v = int(round(40 + 200 * shade[i, j]))
            # row 0 is the southern edge, drawn at the bottom
            parts.append(
                f'<rect x="{j * cw:.2f}" y="{height - (i + 1) * ch:.2f}" width="{cw + 0.05:.2f}" '
                f'height="{ch + 0.05:.2f}" fill="rgb({v},{v},{v})"/>'
            )
    parts.append("</g>")

    cycles = trace.get("cycles", [])
    parts.append('<g id="rejected" fill="none" stroke="#e377c2" stroke-width="1" stroke-opacity="0.5" stroke-dasharray="4 3">')
    for c in cycles:
        for path in c.get("rejected", []):
            if len(path) >= 2:
                parts.append(f'<polyline points="{_points(path, to_px)}"/>')
    parts.append("</g>")

    driven = []
    if trace.get("start") is not None:
        driven.append(tuple(trace["start"][:2]))
    for c in cycles:
        driven.extend(tuple(p) for p in c.get("executed", []))
    parts.append('<g id="driven" fill="none" stroke="#1f77b4" stroke-width="3">')
    if len(driven) >= 2:
        parts.append(f'<polyline points="{_points(driven, to_px)}"/>')
    parts.append("</g>")

    if trace.get("goal") is not None:
        gx, gy = to_px(*trace["goal"][:2])
        r = float(trace.get("goal_tolerance", 0.5)) * PX_PER_M
        parts.append(
            f'<g id="goal"><circle cx="{gx:.2f}" cy="{gy:.2f}" r="{r:.2f}" fill="none" stroke="#d62728" stroke-width="2"/>'
            f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="3" fill="#d62728"/></g>'
        )
    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts) + "\n")
    return out_path
