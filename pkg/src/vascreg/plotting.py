"""Minimal SVG output for registration overlays and uncertainty bands.

Coordinates are detector millimetres; the image y axis points down, as on the
detector.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

GT_COLOR = "#1a9850"      # green
PRED_COLOR = "#d73027"    # red
RIGID_COLOR = "#7f7f7f"
BAND_COLOR = "#fdae61"


class Canvas:
    def __init__(self, points: np.ndarray, size: int = 480, margin: float = 0.08):
        pts = np.asarray(points, float).reshape(-1, 2)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = float(max((hi - lo).max(), 1e-6))
        pad = span * margin
        self.origin = lo - pad
        self.extent = span + 2 * pad
        self.size = size
        self.items: list[str] = []

    def _xy(self, p) -> np.ndarray:
        return (np.asarray(p, float) - self.origin) / self.extent * self.size

    def polyline(self, pts, color, width=1.5, dashed=False, opacity=1.0):
        xy = self._xy(pts)
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
        dash = ' stroke-dasharray="6,4"' if dashed else ""
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}" stroke-opacity="{opacity:.3g}"{dash}/>')

    def polygon(self, pts, color, opacity=0.35):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in self._xy(pts))
        self.items.append(f'<polygon points="{coords}" fill="{color}" fill-opacity="{opacity}" '
                          'stroke="none"/>')

    def text(self, x, y, s, size=12):
        self.items.append(f'<text x="{x}" y="{y}" font-family="sans-serif" '
                          f'font-size="{size}">{escape(s)}</text>')

    def scale_bar(self, mm: float = 10.0):
        px = mm / self.extent * self.size
        y = self.size - 12
        self.items.append(f'<line x1="10" y1="{y}" x2="{10 + px:.2f}" y2="{y}" '
                          'stroke="black" stroke-width="2"/>')
        self.text(10, y - 4, f"{mm:g} mm", 10)

    def render(self, metadata: str = "") -> str:
        meta = f"<metadata>{escape(metadata)}</metadata>" if metadata else ""
        body = "\n".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" '
                f'height="{self.size}" viewBox="0 0 {self.size} {self.size}">{meta}\n'
                f'<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n')


def normals(curve: np.ndarray) -> np.ndarray:
    """Unit normals of a 2D polyline from central-difference tangents."""
    tang = np.gradient(np.asarray(curve, float), axis=0)
    tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-12)
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def band_polygon(mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Closed outline of mean +/- std measured along the curve normal."""
    n = normals(mean)
    upper = mean + n * std[:, None]
    lower = mean - n * std[:, None]
    return np.concatenate([upper, lower[::-1]])


def overlay_svg(gt: Sequence[np.ndarray], pred: Sequence[np.ndarray],
                rigid: Sequence[np.ndarray] = (), title: str = "", metadata: str = "") -> str:
    """Ground truth in green, prediction as red dashes, optional rigid result in grey."""
    allpts = np.concatenate([np.asarray(c).reshape(-1, 2) for c in [*gt, *pred, *rigid]])
    cv = Canvas(allpts)
    for c in rigid:
        cv.polyline(c, RIGID_COLOR, 1.0, opacity=0.7)
    for c in gt:
        cv.polyline(c, GT_COLOR, 2.0)
    for c in pred:
        cv.polyline(c, PRED_COLOR, 1.5, dashed=True)
    if title:
        cv.text(10, 18, title)
    cv.scale_bar()
    return cv.render(metadata)


def uncertainty_svg(gt: np.ndarray, mean: np.ndarray, std: np.ndarray, samples: np.ndarray,
                    title: str = "", metadata: str = "") -> str:
    """Sample fan, +/-1 std band around the mean, mean curve and ground truth."""
    band = band_polygon(mean, std)
    cv = Canvas(np.concatenate([gt, band, np.asarray(samples).reshape(-1, 2)]))
    cv.polygon(band, BAND_COLOR)
    for s in samples:
        cv.polyline(s, PRED_COLOR, 0.6, opacity=0.25)
    cv.polyline(gt, GT_COLOR, 2.0)
    cv.polyline(mean, PRED_COLOR, 1.5, dashed=True)
    if title:
        cv.text(10, 18, title)
    cv.scale_bar()
    return cv.render(metadata)


def write_svg(path, text: str) -> None:
    Path(path).write_text(text)
