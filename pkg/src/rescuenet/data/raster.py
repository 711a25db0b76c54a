"""Pixel-centre, even-odd rasterization of polygon labels into class masks."""

from __future__ import annotations

import logging

import numpy as np

from .wkt import PolygonLabel, Ring

log = logging.getLogger(__name__)

IGNORE = 255


def ring_area(ring: Ring) -> float:
    a = 0.0
    for (x1, y1), (x2, y2) in zip(ring, ring[1:]):
        a += x1 * y2 - x2 * y1
    return 0.5 * a


def _edges(rings: list[Ring]) -> np.ndarray:
    segs = [(x1, y1, x2, y2) for ring in rings for (x1, y1), (x2, y2) in zip(ring, ring[1:])]
    return np.asarray(segs, dtype=np.float64).reshape(-1, 4)


def polygon_coverage(rings: list[Ring], h: int, w: int) -> np.ndarray:
    """Boolean H×W map of pixels whose centre lies inside under the even-odd rule.

    Works one scanline at a time: the crossings of row ``r``'s centre line
    with every edge are collected, and a pixel centre is inside when an odd
    number of crossings lies strictly to its right.
    """
    out = np.zeros((h, w), dtype=bool)
    edges = _edges(rings)
    if edges.size == 0:
        return out
    x1, y1, x2, y2 = edges.T
    ymin = max(int(np.floor(min(y1.min(), y2.min()))), 0)
    ymax = min(int(np.ceil(max(y1.max(), y2.max()))), h)
    centres = np.arange(w, dtype=np.float64) + 0.5
    for r in range(ymin, ymax):
        py = r + 0.5
        hit = (y1 > py) != (y2 > py)
        if not hit.any():
            continue
        ex1, ey1, ex2, ey2 = x1[hit], y1[hit], x2[hit], y2[hit]
        xs = np.sort(ex1 + (py - ey1) * (ex2 - ex1) / (ey2 - ey1))
        right = xs.size - np.searchsorted(xs, centres, side="right")
        out[r] = (right % 2) == 1
    return out


def rasterize_polygons(
    labels: list[PolygonLabel], h: int, w: int, return_skipped: bool = False
):
    """Paint polygons in order (later ones overwrite earlier) into a uint8 mask.

    Unclassified polygons are painted with 255. Zero-area polygons are
    skipped; their number is logged and optionally returned.
    """
    mask = np.zeros((h, w), dtype=np.uint8)
    skipped = 0
    for label in labels:
        if ring_area(label.exterior) == 0:
            skipped += 1
            continue
        value = IGNORE if label.damage_class is None else int(label.damage_class)
        mask[polygon_coverage(label.rings, h, w)] = value
    if skipped:
        log.warning("skipped %d degenerate polygon(s)", skipped)
    return (mask, skipped) if return_skipped else mask
