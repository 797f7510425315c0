"""Byte-deterministic BEV rendering: ego marker plus filled oriented rectangles.

The canvas maps normalized raster coordinates onto CANVAS_SIZE pixels with
the ego at the center; the vehicle front points toward the image top. PPM
output is bit-exact for identical inputs; .png paths are exported through
matplotlib as a convenience and carry no byte guarantee.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .dataset import write_ppm
from .geometry import Detection, OrientedBox, to_aabb

CANVAS_SIZE = 240
DIVIDER = 4  # pixels between side-by-side panels

BACKGROUND_COLOR = (255, 255, 255)
DET_COLOR = (220, 60, 50)
GT_COLOR = (70, 170, 80)
EGO_COLOR = (35, 35, 35)
EGO_TIP_COLOR = (60, 60, 200)


def _fill_box(canvas: np.ndarray, box: OrientedBox, color) -> None:
    """Scanline-style fill: classify pixel centers inside the rotated rectangle."""
    s = canvas.shape[0]
    ab = to_aabb(box)
    c0 = max(0, math.floor(ab.xmin * s - 1))
    c1 = min(s - 1, math.ceil(ab.xmax * s + 1))
    r0 = max(0, math.floor(ab.ymin * s - 1))
    r1 = min(s - 1, math.ceil(ab.ymax * s + 1))
    if c1 < c0 or r1 < r0:
        return
    cols = (np.arange(c0, c1 + 1) + 0.5) / s
    rows = (np.arange(r0, r1 + 1) + 0.5) / s
    px, py = np.meshgrid(cols, rows)
    c, si = math.cos(box.theta), math.sin(box.theta)
    dx, dy = px - box.cx, py - box.cy
    u = dx * c + dy * si
    v = -dx * si + dy * c
    inside = (np.abs(u) <= box.width / 2.0) & (np.abs(v) <= box.height / 2.0)
    patch = canvas[r0:r1 + 1, c0:c1 + 1]
    patch[inside] = color


def _draw_ego(canvas: np.ndarray) -> None:
    s = canvas.shape[0]
    half = s // 2
    canvas[half - 7:half + 8, half - 4:half + 5] = EGO_COLOR
    canvas[half - 12:half - 7, half - 2:half + 3] = EGO_TIP_COLOR  # nose, points up


def render_panel(boxes: list[OrientedBox], color) -> np.ndarray:
    canvas = np.full((CANVAS_SIZE, CANVAS_SIZE, 3), BACKGROUND_COLOR, dtype=np.uint8)
    for b in boxes:
        _fill_box(canvas, b, color)
    _draw_ego(canvas)
    return canvas


def render_bev(dets: list[Detection], gt: list[OrientedBox] | None, out_path) -> None:
    """Render detections (and, when gt is given, a side-by-side gt panel).

    All boxes are taken in the y-down raster frame. Output format follows the
    file extension: .ppm is byte-deterministic, .png goes through matplotlib.
    """
    left = render_panel([d.box for d in dets], DET_COLOR)
    if gt is not None:
        divider = np.zeros((CANVAS_SIZE, DIVIDER, 3), dtype=np.uint8)
        right = render_panel(list(gt), GT_COLOR)
        image = np.concatenate([left, divider, right], axis=1)
    else:
        image = left
    out_path = Path(out_path)
    if out_path.suffix.lower() == ".png":
        import matplotlib
        matplotlib.use("Agg", force=True)
        import matplotlib.image as mpimg
        mpimg.imsave(out_path, image)
    else:
        write_ppm(out_path, image)
