"""Reconstruction-based anomaly scorers trained on defect-free superpixel patches."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

from ._archive import read_archive, write_archive
from .core import ShapeError
from .ingest import ConfigurationError
from .segnet import LogEntry, NumericalError
from .slic import PatchSample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
KINDS = ("vae", "latent_residual", "skip_ae")


@dataclass
class DetectorConfig:
    kind: str = "vae"
    latent_dim: int = 64
    patch_size: int = 64
    base_channels: int = 16
    beta: float = 1.0
    lambda_latent: float = 0.5
    adversarial: bool = False
    adv_weight: float = 1.0
    seed: int = 0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown detector kind {self.kind!r}")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if not 0.0 <= self.lambda_latent <= 1.0:
            raise ConfigurationError("lambda_latent must lie in [0, 1]")
        if self.patch_size < 8 or self.patch_size & (self.patch_size - 1):
            raise ConfigurationError("patch_size must be a power of two >= 8")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError("epochs, batch_size and lr must be positive")

    @property
    def levels(self) -> int:
        # downsample to a 4x4 grid
        return int(math.log2(self.patch_size)) - 2

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.kind == "skip_ae" else self.lambda_latent


def kl_standard_normal(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    if isinstance(mu, torch.Tensor):
        return 0.5 * (logvar.exp() + mu**2 - 1.0 - logvar).sum(dim=-1)
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have equal shapes")
    return 0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar, axis=-1)


# -- networks -------------------------------------------------------------------

class Encoder(nn.Module):
    def __init__(self, cfg: DetectorConfig, out_dim: int):
        super().__init__()
        layers, cin = [], 3
        for i in range(cfg.levels):
            cout = cfg.base_channels * 2**i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin * 16, out_dim)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


class Decoder(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        chans = [cfg.base_channels * 2**i for i in range(cfg.levels)][::-1]
        self.top = chans[0]
        self.fc = nn.Linear(cfg.latent_dim, chans[0] * 16)
        layers = []
        for cin, cout in zip(chans, chans[1:] + [chans[-1]]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], 3, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        return self.body(self.fc(z).view(-1, self.top, 4, 4))


class VAE(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.encoder = Encoder(cfg, 2 * cfg.latent_dim)
        self.decoder = Decoder(cfg)

    def encode(self, x):
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar

    def forward(self, x, sample: bool = True):
        mu, logvar = self.encode(x)
        z = mu + torch.randn_like(mu) * (0.5 * logvar).exp() if sample else mu
        return self.decoder(z), mu, logvar


class LatentResidualAE(nn.Module):
    """Encoder, decoder and a second encoder applied to the reconstruction."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.encoder = Encoder(cfg, cfg.latent_dim)
        self.decoder = Decoder(cfg)
        self.encoder2 = Encoder(cfg, cfg.latent_dim)

    def forward(self, x):
        z = self.encoder(x)
        recon = self.decoder(z)
        return recon, z, self.encoder2(recon)


class SkipAE(nn.Module):
    """Convolutional autoencoder with skip connections below full resolution.

    The finest level has no skip so the input cannot be copied straight through.
    """

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        chans = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.downs = nn.ModuleList()
        cin = 3
        for c in chans:
            self.downs.append(nn.Sequential(nn.Conv2d(cin, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)))
            cin = c
        self.to_latent = nn.Linear(cin * 16, cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, cin * 16)
        self.ups = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            skip = chans[i] if i > 0 else 0
            cout = chans[i - 1] if i > 0 else chans[0]
            self.ups.append(nn.Sequential(nn.ConvTranspose2d(chans[i] + skip, cout, 4, stride=2, padding=1),
                                          nn.LeakyReLU(0.2)))
        self.out = nn.Conv2d(chans[0], 3, 3, padding=1)
        self.top = cin

    def forward(self, x):
        feats = []
        for d in self.downs:
            x = d(x)
            feats.append(x)
        z = self.to_latent(x.flatten(1))
        x = self.from_latent(z).view(-1, self.top, 4, 4)
        n = len(self.ups)
        for j, up in enumerate(self.ups):
            level = n - 1 - j
            if level > 0:
                x = torch.cat([x, feats[level]], dim=1)
            x = up(x)
        return self.out(x), z


class Discriminator(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.encoder = Encoder(cfg, 1)

    def forward(self, x):
        feat = self.encoder.features(x)
        return self.encoder.fc(feat.flatten(1)).squeeze(1), feat


def build_detector(cfg: DetectorConfig) -> nn.Module:
    torch.manual_seed(cfg.seed)
    return {"vae": VAE, "latent_residual": LatentResidualAE, "skip_ae": SkipAE}[cfg.kind](cfg)


def detector_loss(net: nn.Module, cfg: DetectorConfig, x: torch.Tensor, sample: bool = True):
    """Training objective per element; returns ``(loss, reconstruction)``.

    For the VAE the summed KL is divided by the number of pixel values per
    patch so it lives on the same per-element scale as the reconstruction term.
    """
    if cfg.kind == "vae":
        recon, mu, logvar = net(x, sample=sample)
        per_patch = x[0].numel()
        loss = F.mse_loss(recon, x) + cfg.beta * kl_standard_normal(mu, logvar).mean() / per_patch
    elif cfg.kind == "latent_residual":
        recon, z1, z2 = net(x)
        loss = F.mse_loss(recon, x) + ((z1 - z2) ** 2).sum(dim=1).mean() / cfg.latent_dim
    else:
        recon, _ = net(x)
        loss = F.mse_loss(recon, x)
    return loss, recon


# -- checkpoint --------------------------------------------------------------------

@dataclass
class DetectorCheckpoint:
    config: DetectorConfig
    weights: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    training_log: list[LogEntry] = field(default_factory=list)
    threshold: float | None = None

    def model(self) -> nn.Module:
        net = {"vae": VAE, "latent_residual": LatentResidualAE, "skip_ae": SkipAE}[self.config.kind](self.config)
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
        net.eval()
        return net


def _state(net: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}


def _stack(patches: list[PatchSample], mean, std) -> torch.Tensor:
    arr = np.stack([p.pixels for p in patches]).astype(np.float64)
    arr = (arr - mean) / std
    return torch.from_numpy(np.transpose(arr, (0, 3, 1, 2)).astype(np.float32))


def train_detector(patches: list[PatchSample], cfg: DetectorConfig) -> DetectorCheckpoint:
    """Fit the configured scorer on normal patches only."""
    if not patches:
        raise ConfigurationError("no training patches")
    for p in patches:
        if p.pixels.shape != (cfg.patch_size, cfg.patch_size, 3):
            raise ShapeError(f"patch {p.key} has shape {p.pixels.shape}, expected {cfg.patch_size}")
    pix = np.stack([p.pixels for p in patches])
    mean = pix.mean(axis=(0, 1, 2))
    std = np.maximum(pix.std(axis=(0, 1, 2)), 1e-3)
    net = build_detector(cfg)
    ckpt = DetectorCheckpoint(cfg, _state(net), mean, std)
    if cfg.epochs == 0:
        return ckpt
    torch.manual_seed(cfg.seed)
    x_all = _stack(patches, mean, std)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    disc = d_opt = None
    if cfg.adversarial:
        disc = Discriminator(cfg)
        d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = rng.permutation(len(patches))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size), start=1):
            x = x_all[torch.from_numpy(order[start : start + cfg.batch_size])]
            loss, recon = detector_loss(net, cfg, x)
            if disc is not None:
                _, f_real = disc(x)
                _, f_fake = disc(recon)
                loss = loss + cfg.adv_weight * F.mse_loss(f_fake, f_real.detach())
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}, lr {cfg.lr}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if disc is not None:
                real_logit, _ = disc(x)
                fake_logit, _ = disc(recon.detach())
                d_loss = (F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit))
                          + F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit)))
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
            total += loss.item() * len(x)
        entry = LogEntry(epoch, total / len(order))
        log.info("epoch %d mean loss %.5f", *entry)
        ckpt.training_log.append(entry)
    ckpt.weights = _state(net)
    return ckpt


# -- scoring -----------------------------------------------------------------------

@dataclass
class ScoredPatch:
    patch: PatchSample
    score: float
    heatmap: np.ndarray


@torch.no_grad()
def score_batch(ckpt: DetectorCheckpoint, patches: list[PatchSample], net: nn.Module | None = None,
                batch_size: int = 256) -> list[ScoredPatch]:
    cfg = ckpt.config
    size = (cfg.patch_size, cfg.patch_size, 3)
    for p in patches:
        if p.pixels.shape != size:
            raise ShapeError(f"patch {p.key} has shape {p.pixels.shape}, expected {size}")
    net = net or ckpt.model()
    net.eval()
    lam = cfg.effective_lambda
    std = torch.from_numpy(ckpt.std.astype(np.float32)).view(1, 3, 1, 1)
    out = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        x = _stack(chunk, ckpt.mean, ckpt.std)
        if cfg.kind == "vae":
            recon, mu, logvar = net(x, sample=False)
            latent = kl_standard_normal(mu, logvar)
        elif cfg.kind == "latent_residual":
            recon, z1, z2 = net(x)
            latent = (z1 - z2).norm(dim=1)
        else:
            recon, _ = net(x)
            latent = torch.zeros(len(chunk))
        heat = ((x - recon) * std).abs().mean(dim=1).double().numpy()
        latent = latent.double().numpy()
        for p, h, lt in zip(chunk, heat, latent):
            s = (1.0 - lam) * float(h.mean()) + lam * float(lt)
            out.append(ScoredPatch(p, s, h))
    return out


def score(ckpt: DetectorCheckpoint, patch: PatchSample) -> ScoredPatch:
    return score_batch(ckpt, [patch])[0]


def calibrate_threshold(normal_scores, q: float = 0.95) -> float:
    """Nearest-rank empirical ``q``-quantile."""
    s = np.sort(np.asarray(normal_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("need at least one score")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    rank = max(1, math.ceil(q * s.size - 1e-9))
    return float(s[rank - 1])


@dataclass
class FlaggedPatch:
    patch: PatchSample
    score: float
    mask: np.ndarray


def flag_anomalies(scored: list[ScoredPatch], threshold: float, heatmap_q: float = 0.95) -> list[FlaggedPatch]:
    out = []
    for sp in scored:
        if sp.score > threshold:
            out.append(FlaggedPatch(sp.patch, sp.score, sp.heatmap >= calibrate_threshold(sp.heatmap, heatmap_q)))
    return out


# -- on-disk formats -------------------------------------------------------------------

def save_detector(path, ckpt: DetectorCheckpoint) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "detector",
        "config": asdict(ckpt.config),
        "training_log": [list(e) for e in ckpt.training_log],
        "threshold": ckpt.threshold,
    }
    arrays = {f"weights/{k}": v for k, v in ckpt.weights.items()}
    arrays["norm/mean"] = ckpt.mean
    arrays["norm/std"] = ckpt.std
    write_archive(path, header, arrays)


def load_detector(path) -> DetectorCheckpoint:
    header, arrays = read_archive(path)
    if header.get("format_version") != CHECKPOINT_VERSION or header.get("kind") != "detector":
        raise ConfigurationError(
            f"unsupported checkpoint (kind={header.get('kind')}, version={header.get('format_version')})"
        )
    weights = {k[len("weights/"):]: v for k, v in arrays.items() if k.startswith("weights/")}
    entries = [LogEntry(int(e), float(l)) for e, l in header["training_log"]]
    return DetectorCheckpoint(DetectorConfig(**header["config"]), weights,
                              arrays["norm/mean"], arrays["norm/std"], entries, header.get("threshold"))


SCORE_FIELDS = ("image_id", "sp_id", "score", "flagged", "heatmap_scale")


@dataclass
class ScoreRow:
    image_id: str
    sp_id: int
    score: float
    flagged: bool
    heatmap_scale: float


def write_scores(path, scored: list[ScoredPatch], threshold: float, heatmap_dir=None) -> list[ScoreRow]:
    """Scores CSV; heatmaps optionally as 8-bit PNGs scaled by ``heatmap_scale``."""
    rows = []
    for sp in scored:
        scale = float(sp.heatmap.max()) or 1.0
        rows.append(ScoreRow(sp.patch.image_id, sp.patch.sp_id, sp.score, sp.score > threshold, scale))
        if heatmap_dir is not None:
            Path(heatmap_dir).mkdir(parents=True, exist_ok=True)
            img = np.round(np.clip(sp.heatmap / scale, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(img, mode="L").save(Path(heatmap_dir) / f"{sp.patch.key}.png")
    write_score_rows(path, rows)
    return rows


def write_score_rows(path, rows: list[ScoreRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for r in rows:
            w.writerow([r.image_id, r.sp_id, repr(float(r.score)), int(r.flagged), repr(float(r.heatmap_scale))])


def read_scores(path) -> list[ScoreRow]:
    with Path(path).open(newline="") as fh:
        return [
            ScoreRow(r["image_id"], int(r["sp_id"]), float(r["score"]), bool(int(r["flagged"])),
                     float(r["heatmap_scale"]))
            for r in csv.DictReader(fh)
        ]
