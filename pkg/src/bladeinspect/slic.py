"""SLIC superpixels in CIELAB + position space, and superpixel patch extraction.

The pixel-to-centre distance is additive::

    D = d_lab + (m / interval) * d_xy

with ``d_lab`` and ``d_xy`` plain Euclidean distances, ``interval`` the seeding
grid step and ``m`` the spatial proximity factor.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import ColorSpace, ImageBuffer, InvalidColorSpace, ShapeError, load_image_png, save_image_png
from .ingest import resize_array


@dataclass
class SlicConfig:
    n_clusters: int = 100
    m: float = 10.0
    max_iter: int = 10
    min_region: int | None = None  # None: interval**2 // 4

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.m <= 0:
            raise ValueError("m must be positive")


@dataclass
class ClusterCenter:
    l: float
    a: float
    b: float
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.a, self.b, self.x, self.y])


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    centers: list[ClusterCenter]
    interval: int
    config: SlicConfig | None = None

    @property
    def n_segments(self) -> int:
        return len(self.centers)

    def center_array(self) -> np.ndarray:
        return np.array([c.as_array() for c in self.centers]).reshape(-1, 5)


def grid_interval(h: int, w: int, n: int) -> int:
    return max(1, int(math.floor(math.sqrt(h * w / n) + 0.5)))


def _grid_positions(size: int, interval: int) -> np.ndarray:
    count = max(1, int(math.floor(size / interval + 0.5)))
    return np.floor((np.arange(count) + 0.5) * size / count).astype(int)


def _gradient(lab: np.ndarray) -> np.ndarray:
    p = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (gx**2).sum(-1) + (gy**2).sum(-1)


def _check_lab(img: ImageBuffer) -> np.ndarray:
    if img.color_space is not ColorSpace.LAB:
        raise InvalidColorSpace(f"SLIC works on LAB images, got {img.color_space.value}")
    return img.pixels


def init_centers(lab: ImageBuffer, n: int) -> list[ClusterCenter]:
    px = _check_lab(lab)
    h, w = px.shape[:2]
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > h * w:
        raise ValueError(f"cannot seed {n} centres in {h * w} pixels")
    interval = grid_interval(h, w, n)
    grad = _gradient(px) if interval >= 3 else None
    centers = []
    for r in _grid_positions(h, interval):
        for c in _grid_positions(w, interval):
            if grad is not None:
                r0, r1 = max(r - 1, 0), min(r + 2, h)
                c0, c1 = max(c - 1, 0), min(c + 2, w)
                win = grad[r0:r1, c0:c1]
                # ties keep the grid position
                if win.min() < grad[r, c]:
                    dr, dc = np.unravel_index(np.argmin(win), win.shape)
                    r, c = r0 + dr, c0 + dc
            l, a, b = px[r, c]
            centers.append(ClusterCenter(l, a, b, float(c), float(r)))
    return centers


def slic_distance(p, c, interval: float, m: float) -> float:
    """Distance between a pixel and a centre, both given as ``(l, a, b, x, y)``."""
    p = np.asarray(p.as_array() if isinstance(p, ClusterCenter) else p, dtype=np.float64)
    c = np.asarray(c.as_array() if isinstance(c, ClusterCenter) else c, dtype=np.float64)
    # hypot keeps tiny differences from underflowing to zero
    d_lab = math.hypot(*(p[:3] - c[:3]))
    d_xy = math.hypot(*(p[3:] - c[3:]))
    return d_lab + (m / interval) * d_xy


def window_bounds(cx: float, cy: float, interval: float, shape: tuple[int, int]):
    """Pixel rows/cols within ``interval`` of the centre along each axis."""
    h, w = shape
    r0, r1 = max(math.ceil(cy - interval), 0), min(math.floor(cy + interval) + 1, h)
    c0, c1 = max(math.ceil(cx - interval), 0), min(math.floor(cx + interval) + 1, w)
    return r0, r1, c0, c1


def _assign(px: np.ndarray, centers: np.ndarray, interval: int, m: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = px.shape[:2]
    best = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int64)
    scale = m / interval
    for k, (l, a, b, cx, cy) in enumerate(centers):
        r0, r1, c0, c1 = window_bounds(cx, cy, interval, (h, w))
        if r0 >= r1 or c0 >= c1:
            continue
        sub = px[r0:r1, c0:c1]
        d_lab = np.sqrt((sub[..., 0] - l) ** 2 + (sub[..., 1] - a) ** 2 + (sub[..., 2] - b) ** 2)
        yy, xx = np.ogrid[r0:r1, c0:c1]
        d = d_lab + scale * np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        # strict comparison: the lower-indexed centre wins exact ties
        upd = d < best[r0:r1, c0:c1]
        best[r0:r1, c0:c1][upd] = d[upd]
        labels[r0:r1, c0:c1][upd] = k
    orphan = labels < 0
    if orphan.any():
        # pixels no window reaches fall back to the globally nearest centre
        rr, cc = np.nonzero(orphan)
        feats = np.column_stack([px[rr, cc], cc, rr])
        d_lab = np.sqrt(((feats[:, None, :3] - centers[None, :, :3]) ** 2).sum(-1))
        d_xy = np.sqrt(((feats[:, None, 3:] - centers[None, :, 3:]) ** 2).sum(-1))
        labels[rr, cc] = np.argmin(d_lab + scale * d_xy, axis=1)
    return labels, best


def _update(px: np.ndarray, labels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    h, w = labels.shape
    k = len(centers)
    yy, xx = np.mgrid[0:h, 0:w]
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k)
    feats = [px[..., 0], px[..., 1], px[..., 2], xx, yy]
    sums = np.stack([np.bincount(flat, weights=f.ravel(), minlength=k) for f in feats], axis=1)
    out = centers.copy()
    alive = counts > 0
    out[alive] = sums[alive] / counts[alive, None]
    return out


def _components(labels: np.ndarray):
    comp = np.empty(labels.shape, dtype=np.int64)
    comp_label = []
    next_id = 0
    four = ndimage.generate_binary_structure(2, 1)
    for lab in np.unique(labels):
        cl, n = ndimage.label(labels == lab, structure=four)
        sel = cl > 0
        comp[sel] = cl[sel] - 1 + next_id
        comp_label.extend([lab] * n)
        next_id += n
    sizes = np.bincount(comp.ravel(), minlength=next_id)
    return comp, sizes, np.asarray(comp_label, dtype=labels.dtype)


def _adjacency(comp: np.ndarray, n: int) -> list[set[int]]:
    pairs = []
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        pairs.append(np.column_stack([a[diff], b[diff]]))
    pairs = np.unique(np.concatenate(pairs), axis=0)
    adj = [set() for _ in range(n)]
    for a, b in pairs:
        adj[a].add(int(b))
        adj[b].add(int(a))
    return adj


def enforce_connectivity(labels: np.ndarray, min_region: int) -> np.ndarray:
    """Merge stray fragments into their largest 4-adjacent neighbour.

    A fragment is any connected piece that is not the largest piece of its
    label, or any piece smaller than ``min_region`` pixels. Label values are
    preserved (no relabelling).
    """
    labels = np.asarray(labels).copy()
    while True:
        comp, sizes, comp_label = _components(labels)
        n = len(sizes)
        main = np.zeros(n, dtype=bool)
        for lab in np.unique(comp_label):
            ids = np.flatnonzero(comp_label == lab)
            main[ids[np.argmax(sizes[ids])]] = True
        bad = [c for c in range(n) if not main[c] or sizes[c] < min_region]
        if not bad:
            return labels
        adj = _adjacency(comp, n)
        parent = np.arange(n)

        def find(c):
            while parent[c] != c:
                parent[c] = parent[parent[c]]
                c = parent[c]
            return c

        size = sizes.astype(np.int64).copy()
        changed = False
        for c in sorted(bad, key=lambda c: (sizes[c], c)):
            root = find(c)
            neigh = {find(o) for o in adj[c]} - {root}
            if not neigh:
                continue
            target = max(neigh, key=lambda o: (size[o], -o))
            parent[root] = target
            size[target] += size[root]
            changed = True
        if not changed:
            return labels
        roots = np.array([find(c) for c in range(n)])
        labels = comp_label[roots][comp]


def slic_segment(lab: ImageBuffer, cfg: SlicConfig | None = None) -> SuperpixelMap:
    cfg = cfg or SlicConfig()
    px = _check_lab(lab)
    h, w = px.shape[:2]
    interval = grid_interval(h, w, cfg.n_clusters)
    centers = np.array([c.as_array() for c in init_centers(lab, cfg.n_clusters)])
    for _ in range(cfg.max_iter):
        labels, _ = _assign(px, centers, interval, cfg.m)
        centers = _update(px, labels, centers)
    # final pass so the stored centres are the ones the labels were assigned to
    labels, _ = _assign(px, centers, interval, cfg.m)
    min_region = cfg.min_region if cfg.min_region is not None else interval**2 // 4
    labels = enforce_connectivity(labels, min_region)
    used, labels = np.unique(labels, return_inverse=True)
    labels = labels.reshape(h, w)
    return SuperpixelMap(labels, [ClusterCenter(*map(float, centers[k])) for k in used], interval, cfg)


def boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels whose right or lower neighbour carries a different label."""
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return edge


# -- superpixel patches ----------------------------------------------------------

@dataclass
class PatchSample:
    pixels: np.ndarray
    image_id: str
    sp_id: int
    coverage: float
    defect_fraction: float | None = None
    defect_label: int | None = None

    @property
    def key(self) -> str:
        return f"{self.image_id}_{self.sp_id}"


def extract_superpixel_patches(
    img: ImageBuffer,
    spmap: SuperpixelMap,
    blade_mask: np.ndarray,
    patch_size: int = 64,
    coverage_min: float = 0.6,
    defect_mask: np.ndarray | None = None,
    defect_min_fraction: float = 0.05,
) -> list[PatchSample]:
    """One square patch per superpixel lying mostly on the blade.

    Pixels inside the superpixel's box but outside the superpixel take the
    superpixel's mean colour. With ``defect_mask`` given, each patch records the
    defect fraction and is labelled 1 when it reaches ``defect_min_fraction``.
    """
    labels = spmap.labels
    if labels.shape != img.shape or blade_mask.shape != img.shape:
        raise ShapeError("image, superpixel labels and blade mask must share a shape")
    px = img.pixels
    out = []
    for sp_id, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            continue
        member = labels[sl] == sp_id
        area = member.sum()
        coverage = float(blade_mask[sl][member].mean())
        if coverage < coverage_min:
            continue
        crop = px[sl].copy()
        crop[~member] = crop[member].mean(axis=0)
        patch = np.clip(resize_array(crop, (patch_size, patch_size)), 0.0, 1.0)
        frac = label = None
        if defect_mask is not None:
            frac = float(defect_mask[sl][member].sum() / area)
            label = int(frac >= defect_min_fraction)
        out.append(PatchSample(patch, img.source_id, sp_id, coverage, frac, label))
    return out


# -- on-disk formats -----------------------------------------------------------

def save_superpixel_map(path, spmap: SuperpixelMap) -> None:
    """16-bit label PNG plus a ``.json`` sidecar with centres and config."""
    path = Path(path)
    if spmap.labels.max() > 65535:
        raise ValueError("too many superpixels for a 16-bit label image")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(spmap.labels.astype(np.uint16)).save(path, format="PNG")
    sidecar = {
        "interval": spmap.interval,
        "config": asdict(spmap.config) if spmap.config else None,
        "centers": [[round(v, 6) for v in (c.l, c.a, c.b, c.x, c.y)] for c in spmap.centers],
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1) + "\n")


def load_superpixel_map(path) -> SuperpixelMap:
    path = Path(path)
    with Image.open(path) as im:
        labels = np.asarray(im).astype(np.int64)
    side = json.loads(path.with_suffix(".json").read_text())
    centers = [ClusterCenter(*c) for c in side["centers"]]
    cfg = SlicConfig(**side["config"]) if side["config"] else None
    return SuperpixelMap(labels, centers, side["interval"], cfg)


MANIFEST_FIELDS = ("image_id", "sp_id", "coverage", "defect_label")


def write_patches(directory, patches: list[PatchSample]) -> Path:
    """Write ``<image>_<sp-id>.png`` files and ``manifest.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for p in patches:
            save_image_png(directory / f"{p.key}.png", p.pixels)
            label = "" if p.defect_label is None else p.defect_label
            writer.writerow([p.image_id, p.sp_id, f"{p.coverage:.6f}", label])
    return manifest


def read_patches(manifest) -> list[PatchSample]:
    manifest = Path(manifest)
    out = []
    with manifest.open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = f"{row['image_id']}_{row['sp_id']}"
            img = load_image_png(manifest.parent / f"{key}.png")
            label = int(row["defect_label"]) if row["defect_label"] != "" else None
            out.append(PatchSample(img.pixels, row["image_id"], int(row["sp_id"]),
                                   float(row["coverage"]), None, label))
    return out
