"""Image containers, colour conversion and mask utilities shared by the pipeline.

Masks are plain ``numpy`` boolean arrays of shape ``(H, W)``; images are wrapped
in :class:`ImageBuffer` so that the colour space travels with the pixels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage


class ColorSpace(str, enum.Enum):
    SRGB = "srgb"
    LAB = "lab"
    GRAY = "gray"


class InvalidColorSpace(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    pixels: np.ndarray
    color_space: ColorSpace = ColorSpace.SRGB
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1 or px.shape[2] not in (1, 3):
            raise ShapeError(f"expected HxWxC with C in (1, 3), got {px.shape}")
        if self.color_space is ColorSpace.GRAY and px.shape[2] != 1:
            raise ShapeError("GRAY images must have one channel")
        if self.color_space is not ColorSpace.GRAY and px.shape[2] != 3:
            raise ShapeError(f"{self.color_space.value} images must have three channels")
        if not np.isfinite(px).all():
            raise ValueError("pixel values must be finite")
        if self.color_space is ColorSpace.LAB:
            lo, hi = np.array([0.0, -128.0, -128.0]), np.array([100.0, 127.0, 127.0])
        else:
            lo, hi = 0.0, 1.0
        tol = 1e-6
        if (px < np.asarray(lo) - tol).any() or (px > np.asarray(hi) + tol).any():
            raise ValueError(f"{self.color_space.value} pixel values out of range")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray) -> "ImageBuffer":
        return ImageBuffer(pixels, self.color_space, self.source_id)


class BoundingBox(NamedTuple):
    """Pixel box, ``x0``/``y0`` inclusive and ``x1``/``y1`` exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def expand(self, margin: int, shape: tuple[int, int]) -> "BoundingBox":
        h, w = shape
        return BoundingBox(
            max(0, self.x0 - margin),
            max(0, self.y0 - margin),
            min(w, self.x1 + margin),
            min(h, self.y1 + margin),
        )

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)


class Component(NamedTuple):
    mask: np.ndarray
    bbox: BoundingBox
    area: int


# sRGB primaries, D65 reference white (2 degree observer)
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)

_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def rgb_to_lab(img: ImageBuffer) -> ImageBuffer:
    if img.color_space is not ColorSpace.SRGB:
        raise InvalidColorSpace(f"rgb_to_lab needs SRGB input, got {img.color_space.value}")
    lin = _srgb_to_linear(np.clip(img.pixels, 0.0, 1.0))
    xyz = lin @ _RGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return ImageBuffer(lab, ColorSpace.LAB, img.source_id)


def lab_to_rgb(img: ImageBuffer) -> ImageBuffer:
    if img.color_space is not ColorSpace.LAB:
        raise InvalidColorSpace(f"lab_to_rgb needs LAB input, got {img.color_space.value}")
    lab = img.pixels
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f**3 > _EPS, f**3, (116.0 * f - 16.0) / _KAPPA)
    # L below the linear-segment knee is exactly linear in Y
    xyz[..., 1] = np.where(lab[..., 0] > _KAPPA * _EPS, fy**3, lab[..., 0] / _KAPPA)
    lin = (xyz * D65_WHITE) @ _XYZ_TO_RGB.T
    return ImageBuffer(np.clip(_linear_to_srgb(lin), 0.0, 1.0), ColorSpace.SRGB, img.source_id)


def to_gray(img: ImageBuffer) -> np.ndarray:
    """Return an ``(H, W)`` luma array (Rec. 709 weights) in [0, 1]."""
    if img.color_space is ColorSpace.GRAY:
        return img.pixels[..., 0]
    if img.color_space is ColorSpace.LAB:
        return img.pixels[..., 0] / 100.0
    return img.pixels @ np.array([0.2126, 0.7152, 0.0722])


def threshold_mask(raw: np.ndarray, t: float) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return np.asarray(raw) >= t


def connected_components(mask: np.ndarray, connectivity: int = 8) -> list[Component]:
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]
    out = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels == idx
        box = BoundingBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        out.append(Component(comp, box, int(areas[idx - 1])))
    # stable sort keeps raster order among equal areas
    out.sort(key=lambda c: -c.area)
    return out


def tight_bbox(mask: np.ndarray) -> BoundingBox | None:
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union else 1.0


# -- on-disk formats -------------------------------------------------------

def save_mask_png(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def save_image_png(path, img: ImageBuffer | np.ndarray) -> None:
    px = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    if isinstance(img, ImageBuffer) and img.color_space is ColorSpace.LAB:
        px = lab_to_rgb(img).pixels
    arr = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(Path(path), format="PNG")


def load_image_png(path, source_id: str | None = None) -> ImageBuffer:
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(arr, ColorSpace.SRGB, source_id if source_id is not None else path.stem)
