"""Split blades into superpixels, learn what normal patches look like, flag the odd ones.

Usage: python demos/03_superpixel_anomalies.py [out_dir]    (about a minute on one core)
"""
import sys
from pathlib import Path

import numpy as np
import torch

from bladeinspect.anodet import DetectorConfig, calibrate_threshold, flag_anomalies, score_batch, train_detector
from bladeinspect.config import ExtractConfig, PatchConfig
from bladeinspect.core import save_image_png
from bladeinspect.ingest import SynthConfig, synth_generate
from bladeinspect.metrics import bootstrap_ci, roc_auc
from bladeinspect.overlay import render_overlay
from bladeinspect.pipeline import blade_patches, exact_instances
from bladeinspect.slic import SlicConfig

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "03"
out.mkdir(parents=True, exist_ok=True)
slic_cfg, patch_cfg = SlicConfig(n_clusters=60), PatchConfig(patch_size=32)


def patches_of(ds):
    per_instance = []
    for s in ds.positives:
        insts = exact_instances(s.image, s.blade_mask, ExtractConfig())
        per_instance += blade_patches(s.image.source_id, insts, slic_cfg, patch_cfg, s.defect_mask)
    return per_instance


# %% normal patches only for training
normal = [p for ip in patches_of(synth_generate(SynthConfig(n_images=14, n_negatives=0, seed=5))) for p in ip.patches]
print(f"{len(normal)} defect-free training patches")
cal = normal[::10]
ckpt = train_detector([p for i, p in enumerate(normal) if i % 10], DetectorConfig(kind="skip_ae", patch_size=32, epochs=20))
threshold = calibrate_threshold([s.score for s in score_batch(ckpt, cal)], 0.95)
print(f"flagging threshold (95th percentile of held-out normal scores): {threshold:.4f}")

# %% a mixed test set: blades with stamped defects
test = patches_of(synth_generate(SynthConfig(n_images=10, n_negatives=0, seed=6, defect_rate=1.0)))
scored = [sp for ip in test for sp in score_batch(ckpt, ip.patches)] if test else []
labels = [sp.patch.defect_label for sp in scored]
auc = roc_auc([sp.score for sp in scored], labels)
lo, hi = bootstrap_ci([sp.score for sp in scored], labels, seed=0)
flagged = flag_anomalies(scored, threshold)
hits = sum(f.patch.defect_label for f in flagged)
print(f"{len(scored)} test patches, {sum(labels)} defective; AUC {auc:.3f} (95% CI {lo:.3f}-{hi:.3f})")
print(f"flagged {len(flagged)} patches, {hits} of them truly defective")

# %% heat overlay: each superpixel coloured by its score relative to the threshold
by_key = {(sp.patch.image_id, sp.patch.sp_id): sp.score for sp in scored}
for ip in test[:4]:
    heat = np.full(ip.spmap.labels.shape, np.nan)
    for sp_id in np.unique(ip.spmap.labels):
        if (ip.instance_id, sp_id) in by_key:
            heat[ip.spmap.labels == sp_id] = min(by_key[(ip.instance_id, sp_id)] / (2 * threshold), 1.0)
    img = render_overlay(ip.instance.crop, labels=ip.spmap.labels, heatmap=heat, heatmap_alpha=0.5)
    save_image_png(out / f"{ip.instance_id}_scores.png", img)
print(f"score overlays written to {out}")
