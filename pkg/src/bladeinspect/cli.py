"""Command-line entry points chaining the inspection pipeline.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import anodet, segnet
from .config import PipelineConfig, load_config
from .core import InvalidColorSpace, ShapeError, load_mask_png, save_image_png, save_mask_png
from .ingest import ConfigurationError, DatasetIndex, synth_generate, write_dataset
from .metrics import UndefinedMetricError
from .morphology import build_pseudo_gt
from .overlay import render_overlay
from .pipeline import (
    blade_patches,
    detect,
    evaluate,
    exact_instances,
    pgt_path,
    segmentation_samples,
    train_detector_calibrated,
)
from .segnet import BladeInstance, NumericalError
from .slic import load_superpixel_map, read_patches, save_superpixel_map, write_patches

log = logging.getLogger("bladeinspect")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out(args) -> Path:
    if not getattr(args, "out_dir", None):
        raise ConfigurationError("--out-dir is required for this command")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rels(idx: DatasetIndex, split: str) -> list[str]:
    train, test = idx.split()
    return {"train": train, "test": test, "all": sorted(idx.positives)}[split]


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    idx = write_dataset(synth_generate(cfg.synth), out)
    print(f"wrote {len(idx.positives)} positives and {len(idx.negatives)} negatives to {out}")
    return EXIT_OK


def cmd_pseudo_gt(args, cfg: PipelineConfig) -> int:
    idx = DatasetIndex.load(args.dataset)
    degenerate = []
    for rel in idx.positives:
        res = build_pseudo_gt(idx.load_image(rel), cfg.pseudo_gt)
        if res.degenerate:
            degenerate.append(rel)
        save_mask_png(pgt_path(idx, rel), res.mask)
    print(f"pseudo ground truth for {len(idx.positives)} images ({len(degenerate)} degenerate)")
    for rel in degenerate:
        print(f"  degenerate: {rel}")
    return EXIT_OK


def _log_json(entries) -> list:
    return [{"epoch": e.epoch, "mean_loss": e.mean_loss} for e in entries]


def cmd_train_seg(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    idx = DatasetIndex.load(args.dataset)
    data = segmentation_samples(idx, cfg)
    ckpt = segnet.train_segmenter(data, cfg.segnet, cfg.train)
    segnet.save_checkpoint(out / "seg.ckpt", ckpt)
    _write_json(out / "seg_train_log.json", _log_json(ckpt.training_log))
    print(f"trained on {len(data)} samples for {cfg.train.epochs} epochs -> {out / 'seg.ckpt'}")
    return EXIT_OK


def _instance_record(iid: str, rel: str, inst: BladeInstance) -> dict:
    return {"instance": iid, "image": rel, "bbox": list(inst.bbox), "confidence": round(inst.confidence, 6)}


def cmd_extract(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    idx = DatasetIndex.load(args.dataset)
    ckpt = segnet.load_checkpoint(args.checkpoint)
    records = []
    for rel in _rels(idx, args.split):
        iid = idx.image_id(rel)
        for k, inst in enumerate(detect(ckpt, idx.load_image(rel), cfg.extract)):
            name = f"{iid}-b{k}"
            save_mask_png(out / "masks" / f"{name}.png", inst.mask)
            save_image_png(out / "blades" / f"{name}.png", inst.crop)
            rec = _instance_record(name, rel, inst)
            rec["mask"] = f"masks/{name}.png"
            rec["crop"] = f"blades/{name}.png"
            records.append(rec)
    _write_json(out / "detections.json", {"threshold": cfg.extract.threshold, "instances": records})
    print(f"{len(records)} blade instances -> {out / 'detections.json'}")
    return EXIT_OK


def _instances_from_detections(path: Path, idx: DatasetIndex):
    data = json.loads(path.read_text())
    by_image: dict[str, list[BladeInstance]] = {}
    for rec in data["instances"]:
        img = idx.load_image(rec["image"])
        mask = load_mask_png(path.parent / rec["mask"])
        insts = exact_instances(img, mask, dataclasses.replace(PipelineConfig().extract, min_area=1))
        by_image.setdefault(rec["image"], []).extend(
            BladeInstance(i.crop, i.mask, i.bbox, rec["confidence"]) for i in insts[:1]
        )
    return by_image


def cmd_slic(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    idx = DatasetIndex.load(args.dataset)
    detected = _instances_from_detections(Path(args.detections), idx) if args.detections else None
    patches, records = [], []
    for rel in _rels(idx, args.split):
        dmask = idx.load_defect_mask(rel)
        if args.exclude_defective and dmask is not None:
            continue
        img = idx.load_image(rel)
        if detected is not None:
            insts = detected.get(rel, [])
        else:
            insts = exact_instances(img, idx.load_mask(rel), cfg.extract)
        if dmask is None and rel in idx.annotations:
            dmask = np.zeros(img.shape, dtype=bool)
        for ip in blade_patches(idx.image_id(rel), insts, cfg.slic, cfg.patches, dmask):
            save_superpixel_map(out / "superpixels" / f"{ip.instance_id}.png", ip.spmap)
            records.append(_instance_record(ip.instance_id, rel, ip.instance))
            patches.extend(ip.patches)
    manifest = write_patches(out / "patches", patches)
    _write_json(out / "instances.json", {"instances": records})
    print(f"{len(patches)} superpixel patches from {len(records)} blades -> {manifest}")
    return EXIT_OK


def cmd_train_ad(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    patches = read_patches(args.patches)
    normal = [p for p in patches if p.defect_label != 1]
    if len(normal) != len(patches):
        log.warning("dropped %d patches labelled defective", len(patches) - len(normal))
    ckpt, threshold = train_detector_calibrated(normal, cfg)
    anodet.save_detector(out / "detector.ckpt", ckpt)
    _write_json(out / "ad_train_log.json", _log_json(ckpt.training_log))
    print(f"{cfg.detector.kind} trained on {len(normal)} patches, threshold {threshold:.6g}")
    return EXIT_OK


def cmd_score(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    ckpt = anodet.load_detector(args.checkpoint)
    patches = read_patches(args.patches)
    threshold = args.threshold if args.threshold is not None else ckpt.threshold
    if threshold is None:
        raise ConfigurationError("checkpoint carries no threshold; pass --threshold")
    scored = anodet.score_batch(ckpt, patches)
    anodet.write_scores(out / "scores.csv", scored, threshold, out / "heatmaps")
    flagged = sum(s.score > threshold for s in scored)
    print(f"scored {len(scored)} patches, {flagged} flagged above {threshold:.6g}")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    idx = DatasetIndex.load(args.dataset)
    seg = segnet.load_checkpoint(args.seg_checkpoint)
    det = anodet.load_detector(args.ad_checkpoint) if args.ad_checkpoint else None
    threshold = det.threshold if det is not None else None
    report, scored = evaluate(idx, seg, det, cfg, threshold, _rels(idx, args.split))
    _write_json(out / "report.json", dataclasses.asdict(report))
    if det is not None:
        anodet.write_scores(out / "scores.csv", scored, threshold if threshold is not None else np.inf)
    auc = "n/a" if report.auc is None else f"{report.auc:.3f} [{report.ci_low:.3f}, {report.ci_high:.3f}]"
    print(f"AP@{report.iou_t} {report.ap:.3f}  AUC {auc}  {report.per_image_ms:.1f} ms/image")
    return EXIT_OK


def cmd_overlay(args, cfg: PipelineConfig) -> int:
    out = _out(args)
    idx = DatasetIndex.load(args.dataset)
    flagged = set()
    if args.scores:
        flagged = {(r.image_id, r.sp_id) for r in anodet.read_scores(args.scores) if r.flagged}
    slic_dir = Path(args.slic_dir) if args.slic_dir else None
    instances = json.loads((slic_dir / "instances.json").read_text())["instances"] if slic_dir else []
    det = json.loads(Path(args.detections).read_text())["instances"] if args.detections else []
    for rel in _rels(idx, args.split):
        img = idx.load_image(rel)
        masks = {k: load_mask_png(Path(args.detections).parent / r["mask"])
                 for k, r in enumerate(det) if r["image"] == rel}
        labels = np.full(img.shape, -1, dtype=np.int64)
        heat = np.full(img.shape, np.nan)
        offset = 0
        for rec in (r for r in instances if r["image"] == rel):
            spmap = load_superpixel_map(slic_dir / "superpixels" / f"{rec['instance']}.png")
            x0, y0, x1, y1 = rec["bbox"]
            labels[y0:y1, x0:x1] = np.where(labels[y0:y1, x0:x1] < 0, spmap.labels + offset,
                                            labels[y0:y1, x0:x1])
            offset += spmap.n_segments
            for sp in {s for i, s in flagged if i == rec["instance"]}:
                heat[y0:y1, x0:x1][spmap.labels == sp] = 1.0
        ov = render_overlay(img, masks, labels if slic_dir else None, heat if flagged else None)
        save_image_png(out / "overlays" / f"{idx.image_id(rel)}.png", ov)
    print(f"overlays -> {out / 'overlays'}")
    return EXIT_OK


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="JSON config file")
    p.add_argument("--seed", type=int, default=default, help="override every seed in the config")
    p.add_argument("--out-dir", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bladeinspect", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "render a synthetic dataset")
    p = add("pseudo-gt", cmd_pseudo_gt, "write <name>.pgt.png masks beside positives")
    p.add_argument("--dataset", required=True)
    p = add("train-seg", cmd_train_seg, "train the blade segmenter")
    p.add_argument("--dataset", required=True)
    p = add("extract", cmd_extract, "segment and cut out blades")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p = add("slic", cmd_slic, "superpixels and patches from blade masks")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", help="detections.json from `extract`; default uses exact masks")
    p.add_argument("--split", choices=("train", "test", "all"), default="train")
    p.add_argument("--exclude-defective", action="store_true", help="skip images with annotated defects")
    p = add("train-ad", cmd_train_ad, "train an anomaly scorer on normal patches")
    p.add_argument("--patches", required=True, help="patch manifest.csv")
    p = add("score", cmd_score, "score patches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--threshold", type=float)
    p = add("evaluate", cmd_evaluate, "AP, AUC, CI and timing on a split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seg-checkpoint", required=True)
    p.add_argument("--ad-checkpoint")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p = add("overlay", cmd_overlay, "render mask/superpixel/anomaly overlays")
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections")
    p.add_argument("--slic-dir")
    p.add_argument("--scores")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        return args.func(args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ShapeError, InvalidColorSpace, UndefinedMetricError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
