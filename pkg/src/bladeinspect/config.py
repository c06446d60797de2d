"""Pipeline configuration: one JSON document, one section per stage."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .anodet import DetectorConfig
from .ingest import ConfigurationError, SynthConfig
from .morphology import PseudoGTConfig
from .segnet import SegNetConfig, TrainHyper
from .slic import SlicConfig


@dataclass
class PatchConfig:
    patch_size: int = 64
    coverage_min: float = 0.6
    defect_min_fraction: float = 0.05


@dataclass
class ExtractConfig:
    threshold: float = 0.5
    min_area: int = 64
    margin: int = 0
    connectivity: int = 8
    tile_stride: int | None = None


@dataclass
class EvalConfig:
    iou_t: float = 0.5
    n_resamples: int = 1000
    level: float = 0.95
    calibrate_q: float = 0.95
    calibration_fraction: float = 0.1
    warmup: int = 3
    mask_source: str = "predicted"
    seed: int = 0

    def __post_init__(self):
        if self.mask_source not in ("predicted", "exact"):
            raise ConfigurationError("mask_source must be 'predicted' or 'exact'")


def _desk_segnet() -> SegNetConfig:
    return SegNetConfig(input_size=(128, 128))


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pseudo_gt: PseudoGTConfig = field(default_factory=PseudoGTConfig)
    segnet: SegNetConfig = field(default_factory=_desk_segnet)
    train: TrainHyper = field(default_factory=TrainHyper)
    slic: SlicConfig = field(default_factory=SlicConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "PipelineConfig":
        self.synth.seed = seed
        self.train.seed = seed
        self.detector.seed = seed
        self.eval.seed = seed
        return self


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    defaults = PipelineConfig()
    sections = {}
    for f in dataclasses.fields(PipelineConfig):
        base = dataclasses.asdict(getattr(defaults, f.name))
        user = data.get(f.name, {})
        if not isinstance(user, dict):
            raise ConfigurationError(f"{f.name}: expected an object")
        unknown = sorted(set(user) - set(base))
        if unknown:
            raise ConfigurationError(f"{f.name}: unknown keys {unknown}")
        sections[f.name] = _build(type(getattr(defaults, f.name)), {**base, **user}, f.name)
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigurationError(f"unknown config sections {unknown}")
    return PipelineConfig(**sections)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
