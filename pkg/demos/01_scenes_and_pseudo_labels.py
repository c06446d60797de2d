"""Render synthetic turbine scenes and derive blade masks without annotations.

Usage: python demos/01_scenes_and_pseudo_labels.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from bladeinspect.core import mask_iou, save_image_png
from bladeinspect.ingest import SynthConfig, synth_generate
from bladeinspect.morphology import PseudoGTConfig, build_pseudo_gt
from bladeinspect.overlay import render_overlay

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "01"
out.mkdir(parents=True, exist_ok=True)

# %% a small dataset: blade scenes plus sky/ground negatives, some blades carry defects
ds = synth_generate(SynthConfig(n_images=8, n_negatives=4, defect_rate=0.5, seed=1))
print(f"{len(ds.positives)} scenes, {len(ds.negatives)} negatives, image size {ds.config.image_size}")
for s in ds.positives[:3]:
    print(f"  {s.image.source_id}: blade covers {s.blade_mask.mean():.1%}, defect pixels {s.defect_mask.sum()}")

# %% pseudo labels: Otsu threshold -> opening with a disk -> keep the largest pieces -> fill holes
cfg = PseudoGTConfig()
ious = []
for s in ds.positives:
    res = build_pseudo_gt(s.image, cfg)
    ious.append(mask_iou(res.mask, s.blade_mask))
    save_image_png(out / f"{s.image.source_id}_pseudo.png",
                   render_overlay(s.image, {1: res.mask}, alpha=0.45))
print(f"pseudo-label IoU against exact masks: min {min(ious):.3f}, mean {np.mean(ious):.3f}")

# %% Otsu always splits an image in two, so on a negative the "blade" is just sky or ground;
# that is why negatives are trained with all-zero targets instead of pseudo labels
neg = build_pseudo_gt(ds.negatives[0], cfg)
print(f"negative image: pseudo mask would cover {neg.mask.mean():.1%}")
print(f"overlays written to {out}")
