"""Glue between stages: training sets, blade-to-patch conversion, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anodet import DetectorCheckpoint, ScoredPatch, calibrate_threshold, score_batch, train_detector
from .config import ExtractConfig, PatchConfig, PipelineConfig
from .core import ImageBuffer, connected_components, load_mask_png, mask_iou, rgb_to_lab
from .ingest import DatasetIndex, TrainSample, sample_negatives, split_dataset
from .metrics import Detection, UndefinedMetricError, average_precision, bootstrap_ci, roc_auc, time_inference
from .morphology import PseudoGTConfig, build_pseudo_gt
from .segnet import BladeInstance, Checkpoint, extract_blades, predict_mask
from .slic import PatchSample, SlicConfig, SuperpixelMap, extract_superpixel_patches, slic_segment

log = logging.getLogger(__name__)


def pgt_path(idx: DatasetIndex, rel: str) -> Path:
    p = idx.path(rel)
    return p.with_name(p.stem + ".pgt.png")


def pseudo_gt_mask(idx: DatasetIndex, rel: str, cfg: PseudoGTConfig) -> np.ndarray:
    """Cached ``<name>.pgt.png`` if present, otherwise computed on the fly."""
    path = pgt_path(idx, rel)
    if path.is_file():
        return load_mask_png(path)
    return build_pseudo_gt(idx.load_image(rel), cfg).mask


def segmentation_samples(idx: DatasetIndex, cfg: PipelineConfig, rels: list[str] | None = None) -> list[TrainSample]:
    """Pseudo-GT positives from the training split plus every negative image once per draw."""
    rels = idx.split()[0] if rels is None else rels
    pos = [TrainSample(idx.load_image(r), pseudo_gt_mask(idx, r, cfg.pseudo_gt)) for r in rels]
    neg = sample_negatives(idx, len(idx.negatives), cfg.train.seed)
    return pos + neg


def detect(ckpt: Checkpoint, img: ImageBuffer, cfg: ExtractConfig) -> list[BladeInstance]:
    raw = predict_mask(ckpt, img, cfg.tile_stride)
    return extract_blades(img, raw, cfg.threshold, cfg.min_area, cfg.margin, cfg.connectivity)


def exact_instances(img: ImageBuffer, mask: np.ndarray, cfg: ExtractConfig) -> list[BladeInstance]:
    return extract_blades(img, mask.astype(np.float64), 0.5, cfg.min_area, cfg.margin, cfg.connectivity)


@dataclass
class InstancePatches:
    instance_id: str
    instance: BladeInstance
    spmap: SuperpixelMap
    patches: list[PatchSample] = field(default_factory=list)


def blade_patches(image_id: str, instances: list[BladeInstance], slic_cfg: SlicConfig,
                  patch_cfg: PatchConfig, defect_mask: np.ndarray | None = None) -> list[InstancePatches]:
    out = []
    for k, inst in enumerate(instances):
        iid = f"{image_id}-b{k}"
        crop = ImageBuffer(inst.crop.pixels, inst.crop.color_space, iid)
        spmap = slic_segment(rgb_to_lab(crop), slic_cfg)
        dm = defect_mask[inst.bbox.slices()] if defect_mask is not None else None
        patches = extract_superpixel_patches(crop, spmap, inst.crop_mask, patch_cfg.patch_size,
                                             patch_cfg.coverage_min, dm, patch_cfg.defect_min_fraction)
        out.append(InstancePatches(iid, inst, spmap, patches))
    return out


def train_detector_calibrated(patches: list[PatchSample], cfg: PipelineConfig) -> tuple[DetectorCheckpoint, float]:
    """Hold out a slice of the normal patches to pick the flagging threshold."""
    ev = cfg.eval
    if len(patches) >= 10:
        train, held = split_dataset(patches, ev.calibration_fraction, cfg.detector.seed)
    else:
        train, held = patches, patches
    ckpt = train_detector(train, cfg.detector)
    scores = [s.score for s in score_batch(ckpt, held)]
    ckpt.threshold = calibrate_threshold(scores, ev.calibrate_q)
    return ckpt, ckpt.threshold


@dataclass
class EvalReport:
    ap: float
    auc: float | None
    ci_low: float | None
    ci_high: float | None
    per_image_ms: float
    config_digest: str
    ap_box: float = 0.0
    per_image_ms_std: float = 0.0
    per_patch_ms: float = 0.0
    extract_threshold: float = 0.5
    flag_threshold: float | None = None
    iou_t: float = 0.5
    n_images: int = 0
    n_detections: int = 0
    n_patches: int = 0
    n_anomalous: int = 0
    mean_mask_iou: float = 0.0
    conventions: dict = field(default_factory=dict)

    TIMING_FIELDS = ("per_image_ms", "per_image_ms_std", "per_patch_ms")


def evaluate(idx: DatasetIndex, seg: Checkpoint, det: DetectorCheckpoint | None, cfg: PipelineConfig,
             flag_threshold: float | None = None, rels: list[str] | None = None):
    """Run detection and anomaly scoring over the test split.

    Returns ``(report, scored_patches)``.
    """
    rels = idx.split()[1] if rels is None else rels
    ev, ex = cfg.eval, cfg.extract
    dets, gts, ious = [], {}, []
    scored: list[ScoredPatch] = []
    labels = []
    images = [idx.load_image(r) for r in rels]
    net = det.model() if det is not None else None
    for rel, img in zip(rels, images):
        gt = idx.load_mask(rel)
        iid = idx.image_id(rel)
        gts[iid] = [c.mask for c in _gt_instances(gt, ex)]
        found = detect(seg, img, ex)
        for inst in found:
            dets.append(Detection.from_mask(iid, inst.mask, inst.confidence))
        pred = np.logical_or.reduce([i.mask for i in found]) if found else np.zeros(gt.shape, bool)
        ious.append(mask_iou(pred, gt))
        if det is None:
            continue
        source = found if ev.mask_source == "predicted" else exact_instances(img, gt, ex)
        dmask = idx.load_defect_mask(rel)
        dmask = dmask if dmask is not None else np.zeros(gt.shape, bool)
        for ip in blade_patches(iid, source, cfg.slic, cfg.patches, dmask):
            if ip.patches:
                scored.extend(score_batch(det, ip.patches, net))
                labels.extend(p.defect_label for p in ip.patches)
    timing = time_inference(lambda im: detect(seg, im, ex), images, ev.warmup) if images else None
    auc = lo = hi = None
    conventions = {"ap_interpolation": "all-points", "ap_iou": "mask",
                   "empty_gt_and_dets_ap": 1.0, "detection_confidence": "mean probability in component"}
    if scored:
        s = [x.score for x in scored]
        try:
            auc = roc_auc(s, labels)
            lo, hi = bootstrap_ci(s, labels, ev.n_resamples, ev.level, ev.seed)
        except UndefinedMetricError as exc:
            conventions["auc"] = f"undefined: {exc}"
    patch_ms = 0.0
    if scored and det is not None:
        patch_ms = time_inference(lambda p: score_batch(det, [p], net), [x.patch for x in scored][:50],
                                  ev.warmup).mean_ms
    report = EvalReport(
        ap=average_precision(dets, gts, ev.iou_t, "mask"),
        ap_box=average_precision(dets, gts, ev.iou_t, "box"),
        auc=auc, ci_low=lo, ci_high=hi,
        per_image_ms=timing.mean_ms if timing else 0.0,
        per_image_ms_std=timing.std_ms if timing else 0.0,
        per_patch_ms=patch_ms,
        config_digest=cfg.digest(),
        extract_threshold=ex.threshold,
        flag_threshold=flag_threshold,
        iou_t=ev.iou_t,
        n_images=len(rels), n_detections=len(dets),
        n_patches=len(scored), n_anomalous=int(sum(labels)),
        mean_mask_iou=float(np.mean(ious)) if ious else 0.0,
        conventions=conventions,
    )
    return report, scored


def _gt_instances(gt: np.ndarray, ex: ExtractConfig):
    return connected_components(gt, ex.connectivity)
