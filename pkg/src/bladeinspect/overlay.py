"""Colour overlays of masks, superpixel boundaries and residual heatmaps."""
from __future__ import annotations

import colorsys
from typing import Mapping, Sequence

import numpy as np

from .core import ColorSpace, ImageBuffer, lab_to_rgb
from .slic import boundaries


def label_color(label_id: int) -> np.ndarray:
    """Stable, well-spread RGB colour for an integer id."""
    hue = (label_id * 0.618033988749895) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.85, 1.0))


def heat_colors(values: np.ndarray) -> np.ndarray:
    """Blue -> green -> red ramp for values in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    blue = np.array([0.0, 0.0, 1.0])
    green = np.array([0.0, 1.0, 0.0])
    red = np.array([1.0, 0.0, 0.0])
    lo = blue + (green - blue) * (v * 2)
    hi = green + (red - green) * (v * 2 - 1)
    return np.where(v < 0.5, lo, hi)


def render_overlay(
    img: ImageBuffer,
    masks: Sequence[np.ndarray] | Mapping[int, np.ndarray] = (),
    labels: np.ndarray | None = None,
    heatmap: np.ndarray | None = None,
    alpha: float = 0.5,
    heatmap_alpha: float = 0.5,
    boundary_color=(1.0, 1.0, 0.0),
) -> ImageBuffer:
    """Blend masks, then heatmap, then draw superpixel boundaries on top.

    ``heatmap`` is read in [0, 1]; NaN entries are left uncoloured.
    """
    if img.color_space is ColorSpace.LAB:
        img = lab_to_rgb(img)
    px = img.pixels
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    out = px.copy()
    items = masks.items() if isinstance(masks, Mapping) else enumerate(masks)
    for label_id, m in items:
        m = np.asarray(m, dtype=bool)
        if m.shape != out.shape[:2]:
            raise ValueError(f"mask shape {m.shape} does not match image {out.shape[:2]}")
        out[m] = (1 - alpha) * out[m] + alpha * label_color(label_id)
    if heatmap is not None:
        heatmap = np.asarray(heatmap, dtype=np.float64)
        sel = np.isfinite(heatmap)
        out[sel] = (1 - heatmap_alpha) * out[sel] + heatmap_alpha * heat_colors(heatmap[sel])
    if labels is not None:
        out[boundaries(np.asarray(labels))] = boundary_color
    return ImageBuffer(out, ColorSpace.SRGB, img.source_id)
