"""Train the blade segmenter on pseudo labels and cut blades out of unseen scenes.

Usage: python demos/02_blade_segmentation.py [out_dir]    (about a minute on one core)
"""
import sys
from pathlib import Path

import numpy as np
import torch

from bladeinspect.core import mask_iou, save_image_png
from bladeinspect.ingest import SynthConfig, TrainSample, synth_generate
from bladeinspect.metrics import Detection, average_precision
from bladeinspect.morphology import PseudoGTConfig, build_pseudo_gt
from bladeinspect.overlay import render_overlay
from bladeinspect.segnet import SegNetConfig, TrainHyper, extract_blades, predict_mask, train_segmenter

torch.set_num_threads(1)
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "02"
out.mkdir(parents=True, exist_ok=True)

synth = dict(image_size=(64, 64), blade_width_range=(10, 16))
train = synth_generate(SynthConfig(n_images=30, n_negatives=10, seed=3, **synth))
test = synth_generate(SynthConfig(n_images=10, n_negatives=0, seed=4, **synth))

# %% training pairs: scenes with pseudo labels, negatives with all-zero targets
# half-size scenes, so the opening disk shrinks too (radius 5 would erase 10 px blades)
pgt = PseudoGTConfig(disk_radius=2)
data = [TrainSample(s.image, build_pseudo_gt(s.image, pgt).mask) for s in train.positives]
data += [TrainSample(n, np.zeros(n.shape, bool), True) for n in train.negatives]
ckpt = train_segmenter(data, SegNetConfig(input_size=(64, 64)), TrainHyper(epochs=15, seed=0))
print("mean loss per epoch:", " ".join(f"{e.mean_loss:.3f}" for e in ckpt.training_log))

# %% predict, threshold at 0.5, split into blade instances
net = ckpt.model()
dets, gts, ious = [], {}, []
for s in test.positives:
    blades = extract_blades(s.image, predict_mask(net, s.image), t=0.5, min_area=32)
    pred = np.logical_or.reduce([b.mask for b in blades]) if blades else np.zeros(s.blade_mask.shape, bool)
    ious.append(mask_iou(pred, s.blade_mask))
    gts[s.image.source_id] = [s.blade_mask]
    dets += [Detection.from_mask(s.image.source_id, b.mask, b.confidence) for b in blades]
    for k, b in enumerate(blades):
        save_image_png(out / f"{s.image.source_id}_blade{k}.png", b.crop)
    save_image_png(out / f"{s.image.source_id}_overlay.png", render_overlay(s.image, dict(enumerate(b.mask for b in blades))))
print(f"held-out mean IoU {np.mean(ious):.3f}, AP@0.5 {average_precision(dets, gts):.3f}, {len(dets)} instances")
print(f"crops and overlays written to {out}")
