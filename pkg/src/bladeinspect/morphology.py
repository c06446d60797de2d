"""Binary morphology and pseudo ground-truth generation for blade masks."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageBuffer, connected_components, to_gray

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StructuringElement:
    bits: np.ndarray
    anchor: tuple[int, int] | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or not bits.any():
            raise ValueError("structuring element needs a 2-D array with at least one true bit")
        anchor = self.anchor
        if anchor is None:
            anchor = (bits.shape[0] // 2, bits.shape[1] // 2)
        r, c = anchor
        if not (0 <= r < bits.shape[0] and 0 <= c < bits.shape[1]):
            raise ValueError(f"anchor {anchor} outside element of shape {bits.shape}")
        if not bits[r, c]:
            raise ValueError("anchor bit must be true")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "anchor", (int(r), int(c)))

    @classmethod
    def box(cls, size: int = 3) -> "StructuringElement":
        return cls(np.ones((size, size), dtype=bool))

    @classmethod
    def disk(cls, radius: int) -> "StructuringElement":
        yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
        return cls(xx**2 + yy**2 <= radius**2)

    def offsets(self) -> np.ndarray:
        """(row, col) displacement of every true bit relative to the anchor."""
        return np.argwhere(self.bits) - np.asarray(self.anchor)

    def reflect(self) -> "StructuringElement":
        h, w = self.bits.shape
        r, c = self.anchor
        return StructuringElement(self.bits[::-1, ::-1], (h - 1 - r, w - 1 - c))

    @property
    def reach(self) -> int:
        return int(np.abs(self.offsets()).max())


def _shifted(m: np.ndarray, dr: int, dc: int, fill: bool) -> np.ndarray:
    """out[z] = m[z + (dr, dc)], ``fill`` where that lies off the grid."""
    h, w = m.shape
    out = np.full_like(m, fill)
    src_r = slice(max(dr, 0), h + min(dr, 0))
    src_c = slice(max(dc, 0), w + min(dc, 0))
    dst_r = slice(max(-dr, 0), h + min(-dr, 0))
    dst_c = slice(max(-dc, 0), w + min(-dc, 0))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = m[src_r, src_c]
    return out


def erode(m: np.ndarray, s: StructuringElement, border: bool = False) -> np.ndarray:
    """True at z iff every bit of ``s`` anchored at z lands on a true pixel.

    Pixels off the grid read as ``border`` (background by default).
    """
    m = np.asarray(m, dtype=bool)
    out = np.ones_like(m)
    for dr, dc in s.offsets():
        out &= _shifted(m, dr, dc, border)
    return out


def dilate(m: np.ndarray, s: StructuringElement, border: bool = False) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    out = np.zeros_like(m)
    for dr, dc in s.offsets():
        out |= _shifted(m, -dr, -dc, border)
    return out


def opening(m: np.ndarray, s: StructuringElement) -> np.ndarray:
    return dilate(erode(m, s), s)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float | None:
    """Otsu's between-class-variance threshold, or None for a constant input."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi - lo < 1e-12:
        return None
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


@dataclass
class PseudoGTConfig:
    disk_radius: int = 5
    keep_components: int = 2
    invert_above: float = 0.6
    fill_holes: bool = True
    connectivity: int = 8


@dataclass
class PseudoGTResult:
    mask: np.ndarray
    degenerate: bool = False
    threshold: float | None = None
    inverted: bool = False


def build_pseudo_gt(img: ImageBuffer, cfg: PseudoGTConfig | None = None) -> PseudoGTResult:
    """Binarise a blade image and clean it up with an opening.

    The brighter Otsu class is taken as blade unless it covers more than
    ``cfg.invert_above`` of the frame, in which case the darker class is used.
    The opening runs on an edge-replicated copy so that blade sections crossing
    the frame are not eaten by the border. Only the ``cfg.keep_components``
    largest components survive, with interior holes filled.
    """
    cfg = cfg or PseudoGTConfig()
    gray = to_gray(img)
    t = otsu_threshold(gray)
    if t is None:
        log.warning("constant image %r: Otsu threshold undefined, returning empty mask", img.source_id)
        return PseudoGTResult(np.zeros(gray.shape, dtype=bool), degenerate=True)
    binary = gray > t
    inverted = binary.mean() > cfg.invert_above
    if inverted:
        binary = ~binary
    elem = StructuringElement.disk(cfg.disk_radius)
    # blades run off the frame: replicate the border so edge-crossing parts survive
    pad = elem.reach
    mask = opening(np.pad(binary, pad, mode="edge"), elem)[pad:-pad, pad:-pad]
    comps = connected_components(mask, cfg.connectivity)[: cfg.keep_components]
    mask = np.zeros_like(mask)
    for comp in comps:
        mask |= comp.mask
    if cfg.fill_holes:
        mask = ndimage.binary_fill_holes(mask)
    return PseudoGTResult(mask, threshold=t, inverted=inverted)
