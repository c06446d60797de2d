"""One-class encoder/decoder blade segmenter with skip connections."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._archive import read_archive, write_archive
from .core import BoundingBox, ImageBuffer, connected_components, threshold_mask
from .ingest import ConfigurationError, TrainSample, augment, resize_array, rescale, tile_image

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


@dataclass
class SegNetConfig:
    depth: int = 5
    base_channels: int = 16
    input_size: tuple[int, int] = (256, 256)
    out_channels: int = 1
    in_channels: int = 3
    image_scale: float = 1.0
    norm: str = "batch"

    def __post_init__(self):
        if self.norm not in ("none", "batch"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be positive")
        h, w = self.input_size
        if h != w:
            raise ConfigurationError("input_size must be square")
        if h % (2**self.depth):
            raise ConfigurationError(f"input_size {self.input_size} not divisible by 2**{self.depth}")
        if self.out_channels != 1:
            raise ConfigurationError("only single-channel (one-class) output is supported")
        if self.image_scale <= 0:
            raise ConfigurationError("image_scale must be positive")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]


@dataclass
class TrainHyper:
    lr: float = 0.001
    weight_decay: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 10
    epochs: int = 10
    optimizer: str = "rmsprop_like"
    seed: int = 0
    augment: bool = True
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.optimizer not in ("rmsprop_like", "plain_sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


def _double_conv(cin: int, cout: int, norm: str = "none") -> nn.Sequential:
    layers = []
    for a, b in ((cin, cout), (cout, cout)):
        layers.append(nn.Conv2d(a, b, 3, padding=1, bias=norm == "none"))
        if norm == "batch":
            layers.append(nn.BatchNorm2d(b))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class UNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        self.encoders = nn.ModuleList()
        cin = cfg.in_channels
        for c in chans:
            self.encoders.append(_double_conv(cin, c, cfg.norm))
            cin = c
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(chans):
            self.ups.append(nn.ConvTranspose2d(cin, c, 2, stride=2))
            self.decoders.append(_double_conv(2 * c, c, cfg.norm))
            cin = c
        self.head = nn.Conv2d(cin, cfg.out_channels, 1)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return x, skips

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, skips = self.encode(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)


def build_model(cfg: SegNetConfig, seed: int = 0) -> UNet:
    torch.manual_seed(seed)
    return UNet(cfg)


def bce_logits_loss(logits, target):
    """Mean binary cross-entropy on logits, in the overflow-free form.

    Accepts numpy arrays (returns a float) or torch tensors (returns a tensor).
    """
    if isinstance(logits, torch.Tensor):
        target = torch.as_tensor(target, dtype=logits.dtype)
        if logits.shape != target.shape:
            raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
        return (logits.clamp(min=0) - logits * target + torch.log1p(torch.exp(-logits.abs()))).mean()
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {y.shape}")
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


class LogEntry(NamedTuple):
    epoch: int
    mean_loss: float


@dataclass
class Checkpoint:
    weights: dict[str, np.ndarray]
    config: SegNetConfig
    hyper: TrainHyper
    seed: int
    training_log: list[LogEntry] = field(default_factory=list)

    def model(self) -> UNet:
        net = UNet(self.config)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
        net.eval()
        return net


def _state(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def _to_tensor(imgs: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.transpose(i, (2, 0, 1)) for i in imgs]).astype(np.float32))


def _make_optimizer(params, hyper: TrainHyper):
    if hyper.optimizer == "rmsprop_like":
        return torch.optim.RMSprop(params, lr=hyper.lr, weight_decay=hyper.weight_decay,
                                   momentum=hyper.momentum)
    return torch.optim.SGD(params, lr=hyper.lr, weight_decay=hyper.weight_decay, momentum=hyper.momentum)


def train_segmenter(data: list[TrainSample], cfg: SegNetConfig, hyper: TrainHyper) -> Checkpoint:
    """Mini-batch training; positives and negatives are shuffled together each epoch.

    Raises :class:`NumericalError` as soon as a batch loss is not finite.
    """
    if not any(s.is_negative for s in data) or all(s.is_negative for s in data):
        raise ConfigurationError("training needs at least one positive and one negative sample")
    net = build_model(cfg, hyper.seed)
    ckpt = Checkpoint(_state(net), cfg, hyper, hyper.seed)
    if hyper.epochs == 0:
        return ckpt
    opt = _make_optimizer(net.parameters(), hyper)
    rng = np.random.default_rng(hyper.seed)
    crop = cfg.input_size
    for epoch in range(1, hyper.epochs + 1):
        net.train()
        order = rng.permutation(len(data))
        aug_seeds = rng.integers(2**31, size=len(data))
        losses = []
        for b, start in enumerate(range(0, len(order), hyper.batch_size), start=1):
            batch = []
            for i in order[start : start + hyper.batch_size]:
                s = data[i]
                if hyper.augment:
                    s = augment(s, int(aug_seeds[i]), crop)
                elif s.image.shape != crop:
                    raise ConfigurationError(f"sample shape {s.image.shape} != input_size {crop}")
                batch.append(s)
            x = _to_tensor([s.image.pixels for s in batch])
            y = torch.from_numpy(np.stack([s.target for s in batch])[:, None].astype(np.float32))
            opt.zero_grad()
            loss = bce_logits_loss(net(x), y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}, lr {hyper.lr}")
            loss.backward()
            if hyper.clip_grad_norm:
                nn.utils.clip_grad_norm_(net.parameters(), hyper.clip_grad_norm)
            opt.step()
            losses.append(loss.item() * len(batch))
        entry = LogEntry(epoch, sum(losses) / len(order))
        log.info("epoch %d mean loss %.5f", *entry)
        ckpt.training_log.append(entry)
    ckpt.weights = _state(net)
    return ckpt


@torch.no_grad()
def predict_mask(ckpt: Checkpoint | UNet, img: ImageBuffer, stride: int | None = None) -> np.ndarray:
    """Per-pixel blade probability at the input image's resolution."""
    net = ckpt.model() if isinstance(ckpt, Checkpoint) else ckpt
    cfg = net.cfg
    net.eval()
    work = rescale(img, cfg.image_scale) if cfg.image_scale != 1.0 else img
    tile = cfg.input_size[0]
    h, w = work.shape
    ph, pw = max(h, tile), max(w, tile)
    px = work.pixels
    if (ph, pw) != (h, w):
        px = np.pad(px, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
    tiles = tile_image(work.with_pixels(px), tile, stride or tile)
    probs = np.zeros((ph, pw))
    hits = np.zeros((ph, pw))
    for t, (r, c) in tiles:
        logits = net(_to_tensor([t.pixels]))[0, 0].double()
        probs[r : r + tile, c : c + tile] += torch.sigmoid(logits).numpy()
        hits[r : r + tile, c : c + tile] += 1
    probs = (probs / hits)[:h, :w]
    if probs.shape != img.shape:
        probs = resize_array(probs, img.shape)
    return np.clip(probs, 0.0, 1.0)


@dataclass
class BladeInstance:
    crop: ImageBuffer
    mask: np.ndarray
    bbox: BoundingBox
    confidence: float

    @property
    def crop_mask(self) -> np.ndarray:
        return self.mask[self.bbox.slices()]


def extract_blades(img: ImageBuffer, raw: np.ndarray, t: float = 0.5, min_area: int = 64,
                   margin: int = 0, connectivity: int = 8) -> list[BladeInstance]:
    """Threshold, split into components and cut out each blade on a black background.

    ``confidence`` is the mean pre-threshold probability inside the component.
    """
    mask = threshold_mask(raw, t)
    out = []
    for comp in connected_components(mask, connectivity):
        if comp.area < min_area:
            continue
        box = comp.bbox.expand(margin, img.shape)
        sl = box.slices()
        crop = img.pixels[sl] * comp.mask[sl][..., None]
        conf = float(np.asarray(raw)[comp.mask].mean())
        out.append(BladeInstance(img.with_pixels(crop), comp.mask, box, conf))
    return out


# -- checkpoint archive ----------------------------------------------------------

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "segnet",
        "config": asdict(ckpt.config),
        "hyper": asdict(ckpt.hyper),
        "seed": ckpt.seed,
        "training_log": [list(e) for e in ckpt.training_log],
    }
    write_archive(path, header, ckpt.weights)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_archive(Path(path))
    if header.get("format_version") != CHECKPOINT_VERSION or header.get("kind") != "segnet":
        raise ConfigurationError(
            f"unsupported checkpoint (kind={header.get('kind')}, version={header.get('format_version')})"
        )
    log_entries = [LogEntry(int(e), float(l)) for e, l in header["training_log"]]
    return Checkpoint(arrays, SegNetConfig(**header["config"]), TrainHyper(**header["hyper"]),
                      header["seed"], log_entries)


def bottleneck_shape(cfg: SegNetConfig) -> tuple[int, int, int]:
    side = cfg.input_size[0] // 2**cfg.depth
    return cfg.channels[-1], side, side


def parameter_count(cfg: SegNetConfig) -> int:
    return sum(p.numel() for p in UNet(cfg).parameters())

