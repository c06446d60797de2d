"""Dataset handling: tiling, augmentation, splitting and a synthetic scene generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .core import (
    ColorSpace,
    ImageBuffer,
    load_image_png,
    load_mask_png,
    save_image_png,
    save_mask_png,
)

INDEX_VERSION = 1
DEFECT_KINDS = ("blob", "scratch", "edge_erosion")


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainSample:
    image: ImageBuffer
    target: np.ndarray
    is_negative: bool = False

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=bool)
        if self.target.shape != self.image.shape:
            raise ValueError(f"target {self.target.shape} does not match image {self.image.shape}")
        if self.is_negative and self.target.any():
            raise ValueError("negative samples must have an all-false target")


# -- geometry ----------------------------------------------------------------

def _anchors(size: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, size - tile + 1, stride))
    if starts[-1] != size - tile:
        starts.append(size - tile)
    return starts


def tile_image(img: ImageBuffer, tile: int, stride: int) -> list[tuple[ImageBuffer, tuple[int, int]]]:
    """Cut ``tile``x``tile`` windows; the last row/column is snapped to the edge."""
    h, w = img.shape
    if tile > min(h, w) or tile < 1:
        raise ValueError(f"tile {tile} does not fit image of shape {(h, w)}")
    if not 1 <= stride <= tile:
        raise ValueError(f"stride must lie in [1, tile], got {stride}")
    out = []
    for r in _anchors(h, tile, stride):
        for c in _anchors(w, tile, stride):
            out.append((img.with_pixels(img.pixels[r : r + tile, c : c + tile]), (r, c)))
    return out


def paste_tiles(tiles, shape: tuple[int, int], average: bool = False) -> np.ndarray:
    """Reassemble ``(array, (row, col))`` pairs; overlaps are averaged or overwritten."""
    first = np.asarray(tiles[0][0].pixels if isinstance(tiles[0][0], ImageBuffer) else tiles[0][0])
    out = np.zeros(shape + first.shape[2:], dtype=np.float64)
    hits = np.zeros(shape, dtype=np.float64)
    for arr, (r, c) in tiles:
        arr = np.asarray(arr.pixels if isinstance(arr, ImageBuffer) else arr)
        th, tw = arr.shape[:2]
        if average:
            out[r : r + th, c : c + tw] += arr
            hits[r : r + th, c : c + tw] += 1
        else:
            out[r : r + th, c : c + tw] = arr
    if average:
        norm = np.maximum(hits, 1)
        out /= norm.reshape(norm.shape + (1,) * (out.ndim - 2))
    return out


def resize_array(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the two leading axes."""
    arr = np.asarray(arr, dtype=np.float64)
    if tuple(arr.shape[:2]) == tuple(shape):
        return arr.copy()
    return resize(arr, tuple(shape) + arr.shape[2:], order=1, mode="edge",
                  anti_aliasing=False, preserve_range=True)


def scaled_shape(shape: tuple[int, int], factor: float) -> tuple[int, int]:
    """Round-half-up target size for a rescale."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    h, w = shape
    nh, nw = int(math.floor(h * factor + 0.5)), int(math.floor(w * factor + 0.5))
    if nh < 1 or nw < 1:
        raise ValueError(f"scaling {(h, w)} by {factor} leaves no pixels")
    return nh, nw


def rescale(img: ImageBuffer, factor: float) -> ImageBuffer:
    return img.with_pixels(resize_array(img.pixels, scaled_shape(img.shape, factor)))


def apply_geometry(s: TrainSample, quarter_turns: int, flip: bool,
                   top: int, left: int, size: tuple[int, int]) -> TrainSample:
    """Rotate CCW by ``quarter_turns`` x 90 deg, optionally mirror left-right, then crop."""
    img = np.rot90(s.image.pixels, quarter_turns)
    tgt = np.rot90(s.target, quarter_turns)
    if flip:
        img, tgt = img[:, ::-1], tgt[:, ::-1]
    ch, cw = size
    if top < 0 or left < 0 or top + ch > img.shape[0] or left + cw > img.shape[1]:
        raise ValueError(f"crop {size} at {(top, left)} exceeds sample {img.shape[:2]}")
    img = np.ascontiguousarray(img[top : top + ch, left : left + cw])
    tgt = np.ascontiguousarray(tgt[top : top + ch, left : left + cw])
    return TrainSample(s.image.with_pixels(img), tgt, s.is_negative)


def augment(s: TrainSample, seed: int, crop_size: tuple[int, int] | None = None) -> TrainSample:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4))
    flip = bool(rng.random() < 0.5)
    h, w = s.image.shape
    if k % 2:
        h, w = w, h
    ch, cw = crop_size if crop_size is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {(ch, cw)} exceeds sample {(h, w)}")
    top = int(rng.integers(h - ch + 1))
    left = int(rng.integers(w - cw + 1))
    return apply_geometry(s, k, flip, top, left, (ch, cw))


def split_dataset(items: list, test_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle then cut; returns ``(train, test)``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if len(items) < 2:
        raise ValueError("need at least two items to split")
    order = np.random.default_rng(seed).permutation(len(items))
    n_test = int(math.floor(test_fraction * len(items) + 0.5))
    test = [items[i] for i in order[:n_test]]
    train = [items[i] for i in order[n_test:]]
    return train, test


# -- dataset index -----------------------------------------------------------

@dataclass
class DatasetIndex:
    root: Path
    positives: list[str] = field(default_factory=list)
    negatives: list[str] = field(default_factory=list)
    annotations: dict[str, str] = field(default_factory=dict)
    defects: dict[str, list[dict]] = field(default_factory=dict)
    split_seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        self.root = Path(self.root)
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise ConfigurationError(f"images listed as both positive and negative: {sorted(overlap)}")

    def path(self, rel: str) -> Path:
        return self.root / rel

    def image_id(self, rel: str) -> str:
        return Path(rel).stem

    def split(self) -> tuple[list[str], list[str]]:
        if len(self.positives) < 2:
            return list(self.positives), []
        return split_dataset(self.positives, self.test_fraction, self.split_seed)

    def load_image(self, rel: str) -> ImageBuffer:
        return load_image_png(self.path(rel), self.image_id(rel))

    def load_mask(self, rel: str) -> np.ndarray:
        return load_mask_png(self.path(self.annotations[rel]))

    def load_defect_mask(self, rel: str) -> np.ndarray | None:
        """Union of annotated defect masks, or None when the image has none."""
        entries = self.defects.get(rel, [])
        if not entries:
            return None
        return np.logical_or.reduce([load_mask_png(self.path(d["mask"])) for d in entries])

    def to_json(self) -> dict:
        train, test = self.split()
        return {
            "version": INDEX_VERSION,
            "split_seed": self.split_seed,
            "test_fraction": self.test_fraction,
            "positives": sorted(self.positives),
            "negatives": sorted(self.negatives),
            "annotations": dict(sorted(self.annotations.items())),
            "defects": dict(sorted(self.defects.items())),
            "split": {"train": sorted(train), "test": sorted(test)},
        }

    def save(self) -> Path:
        out = self.root / "index.json"
        out.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, root) -> "DatasetIndex":
        root = Path(root)
        data = json.loads((root / "index.json").read_text())
        if data.get("version") != INDEX_VERSION:
            raise ConfigurationError(f"unsupported index version {data.get('version')}")
        idx = cls(root, data["positives"], data["negatives"], data["annotations"],
                  data["defects"], data["split_seed"], data["test_fraction"])
        for rel in idx.positives + idx.negatives + list(idx.annotations.values()):
            if not idx.path(rel).is_file():
                raise FileNotFoundError(idx.path(rel))
        return idx


def sample_negatives(idx: DatasetIndex, n: int, seed: int) -> list[TrainSample]:
    if not idx.negatives:
        raise ConfigurationError("no negative images in the dataset")
    rng = np.random.default_rng(seed)
    picks = rng.integers(len(idx.negatives), size=n)
    cache: dict[int, ImageBuffer] = {}
    out = []
    for i in picks:
        i = int(i)
        if i not in cache:
            cache[i] = idx.load_image(idx.negatives[i])
        img = cache[i]
        out.append(TrainSample(img, np.zeros(img.shape, dtype=bool), is_negative=True))
    return out


# -- synthetic scenes ----------------------------------------------------------

@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (128, 128)
    n_images: int = 40
    n_negatives: int | None = None  # default: half of n_images
    blade_width_range: tuple[int, int] = (18, 30)
    defect_kinds: tuple[str, ...] = DEFECT_KINDS
    defect_rate: float = 0.0
    noise_sigma: float = 0.02
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.blade_width_range = tuple(int(v) for v in self.blade_width_range)
        self.defect_kinds = tuple(self.defect_kinds)
        lo, hi = self.blade_width_range
        if not 1 <= lo <= hi < min(self.image_size):
            raise ConfigurationError(f"blade widths {self.blade_width_range} must be below image size")
        if not 0.0 <= self.defect_rate <= 1.0:
            raise ConfigurationError("defect_rate must be a probability")
        unknown = set(self.defect_kinds) - set(DEFECT_KINDS)
        if unknown:
            raise ConfigurationError(f"unknown defect kinds {sorted(unknown)}")
        if self.defect_rate > 0 and not self.defect_kinds:
            raise ConfigurationError("defect_rate > 0 needs at least one defect kind")

    @property
    def negatives_count(self) -> int:
        return self.n_images // 2 if self.n_negatives is None else self.n_negatives


@dataclass
class Defect:
    kind: str
    mask: np.ndarray


@dataclass
class SynthScene:
    image: ImageBuffer
    blade_mask: np.ndarray
    defects: list[Defect] = field(default_factory=list)

    @property
    def defect_mask(self) -> np.ndarray:
        out = np.zeros_like(self.blade_mask)
        for d in self.defects:
            out |= d.mask
        return out


@dataclass
class SynthDataset:
    config: SynthConfig
    positives: list[SynthScene]
    negatives: list[ImageBuffer]


_SS = 4  # supersampling factor per axis for anti-aliased edges


def _background(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    if rng.random() < 0.5:  # sky
        top = rng.uniform([0.30, 0.40, 0.55], [0.45, 0.55, 0.70])
        bottom = rng.uniform([0.20, 0.30, 0.45], [0.35, 0.45, 0.60])
    else:  # sea / ground
        top = rng.uniform([0.15, 0.25, 0.25], [0.35, 0.45, 0.45])
        bottom = rng.uniform([0.10, 0.15, 0.12], [0.30, 0.35, 0.30])
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    bg = top * (1 - t) + bottom * t
    texture = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma=4.0)
    texture /= max(np.abs(texture).max(), 1e-9)
    return bg + 0.06 * texture[..., None] * np.ones((1, 1, 3))


def _blade_coverage(rng, shape, width_range):
    """Anti-aliased coverage in [0,1] of a rotated, frame-crossing rectangle."""
    h, w = shape
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    theta = rng.uniform(0, np.pi)
    width = rng.uniform(*width_range)
    length = rng.uniform(0.9, 1.6) * max(h, w)
    offs = (np.arange(_SS) + 0.5) / _SS
    ys = (np.arange(h)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(w)[:, None] + offs[None, :]).ravel()
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    # taper toward the tip so blades are not plain bars
    half = width / 2 * (1.0 - 0.25 * np.clip((along + length / 2) / length, 0, 1))
    inside = (np.abs(across) <= half) & (np.abs(along) <= length / 2)
    cov = inside.reshape(h, _SS, w, _SS).mean(axis=(1, 3))
    shade = (across / np.maximum(half, 1e-6)).reshape(h, _SS, w, _SS).mean(axis=(1, 3))
    return cov, shade


def _disk(shape, cy, cx, ry, rx=None):
    rx = ry if rx is None else rx
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _stamp_defect(rng, kind, blade_mask):
    interior = ndimage.binary_erosion(blade_mask, iterations=4)
    if kind == "edge_erosion":
        edge = blade_mask & ~ndimage.binary_erosion(blade_mask)
        candidates = np.argwhere(edge)
        if candidates.size == 0:
            return None
        cy, cx = candidates[rng.integers(len(candidates))]
        r = rng.uniform(4.0, 7.0)
        return _disk(blade_mask.shape, cy, cx, r) & blade_mask
    candidates = np.argwhere(interior)
    if candidates.size == 0:
        return None
    cy, cx = candidates[rng.integers(len(candidates))]
    if kind == "blob":
        m = _disk(blade_mask.shape, cy, cx, rng.uniform(2.5, 5.0), rng.uniform(2.5, 5.0))
    else:  # scratch
        length = rng.uniform(10.0, 20.0)
        ang = rng.uniform(0, np.pi)
        t = np.linspace(-length / 2, length / 2, int(length * 3))
        m = np.zeros_like(blade_mask)
        rr = np.clip(np.round(cy + t * np.sin(ang)).astype(int), 0, m.shape[0] - 1)
        cc = np.clip(np.round(cx + t * np.cos(ang)).astype(int), 0, m.shape[1] - 1)
        m[rr, cc] = True
        m = ndimage.binary_dilation(m)
    return m & blade_mask


def render_scene(rng: np.random.Generator, cfg: SynthConfig, n_blades: int = 1,
                 with_defect: bool | None = None) -> SynthScene:
    shape = cfg.image_size
    img = _background(rng, shape)
    blade_mask = np.zeros(shape, dtype=bool)
    for _ in range(n_blades):
        cov, shade = _blade_coverage(rng, shape, cfg.blade_width_range)
        base = rng.uniform(0.80, 0.92) * np.array([1.0, 1.0, rng.uniform(0.97, 1.02)])
        blade = base * (1.0 - 0.08 * shade[..., None] ** 2)
        blade = blade + 0.015 * ndimage.gaussian_filter(rng.normal(size=shape), 1.5)[..., None]
        img = img * (1 - cov[..., None]) + blade * cov[..., None]
        blade_mask |= cov >= 0.5
    if with_defect is None:
        with_defect = bool(cfg.defect_kinds) and rng.random() < cfg.defect_rate
    defects = []
    if with_defect:
        kind = cfg.defect_kinds[int(rng.integers(len(cfg.defect_kinds)))]
        m = _stamp_defect(rng, kind, blade_mask)
        if m is not None and m.any():
            tint = rng.uniform([0.25, 0.20, 0.15], [0.45, 0.35, 0.30])
            soft = ndimage.gaussian_filter(m.astype(float), 0.7)
            soft = np.where(m, np.maximum(soft, 0.6), soft * blade_mask)
            img = img * (1 - soft[..., None]) + tint * soft[..., None]
            defects.append(Defect(kind, m))
    img = img + rng.normal(scale=cfg.noise_sigma, size=img.shape)
    return SynthScene(ImageBuffer(np.clip(img, 0, 1), ColorSpace.SRGB), blade_mask, defects)


def render_negative(rng: np.random.Generator, cfg: SynthConfig) -> ImageBuffer:
    img = _background(rng, cfg.image_size)
    img = img + rng.normal(scale=cfg.noise_sigma, size=img.shape)
    return ImageBuffer(np.clip(img, 0, 1), ColorSpace.SRGB)


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Render scenes; every image draws from its own child of ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    pos_seeds = seeds[0].spawn(cfg.n_images)
    neg_seeds = seeds[1].spawn(cfg.negatives_count)
    positives = []
    for i, ss in enumerate(pos_seeds):
        scene = render_scene(np.random.default_rng(ss), cfg)
        scene.image = ImageBuffer(scene.image.pixels, ColorSpace.SRGB, f"pos_{i:04d}")
        positives.append(scene)
    negatives = [
        ImageBuffer(render_negative(np.random.default_rng(ss), cfg).pixels, ColorSpace.SRGB, f"neg_{i:04d}")
        for i, ss in enumerate(neg_seeds)
    ]
    return SynthDataset(cfg, positives, negatives)


def _quantize(img: ImageBuffer) -> ImageBuffer:
    """Round to 8 bits so in-memory scenes match what a PNG reload gives."""
    return img.with_pixels(np.round(img.pixels * 255.0) / 255.0)


def write_dataset(ds: SynthDataset, root) -> DatasetIndex:
    """Write ``positives/ negatives/ masks/ defects/`` PNGs and ``index.json``."""
    root = Path(root)
    for sub in ("positives", "negatives", "masks", "defects"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    idx = DatasetIndex(root, split_seed=ds.config.seed, test_fraction=ds.config.test_fraction)
    for scene in ds.positives:
        name = scene.image.source_id
        rel = f"positives/{name}.png"
        save_image_png(root / rel, scene.image)
        save_mask_png(root / f"masks/{name}.png", scene.blade_mask)
        idx.positives.append(rel)
        idx.annotations[rel] = f"masks/{name}.png"
        entries = []
        for j, d in enumerate(scene.defects):
            drel = f"defects/{name}_{j}.png"
            save_mask_png(root / drel, d.mask)
            entries.append({"kind": d.kind, "mask": drel})
        idx.defects[rel] = entries
    for img in ds.negatives:
        rel = f"negatives/{img.source_id}.png"
        save_image_png(root / rel, img)
        idx.negatives.append(rel)
    idx.save()
    return idx


def quantized(ds: SynthDataset) -> SynthDataset:
    pos = [SynthScene(_quantize(s.image), s.blade_mask, s.defects) for s in ds.positives]
    return SynthDataset(ds.config, pos, [_quantize(n) for n in ds.negatives])
