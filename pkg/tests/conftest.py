import numpy as np
import pytest
import torch

from bladeinspect.config import ExtractConfig, PatchConfig
from bladeinspect.ingest import SynthConfig, TrainSample, synth_generate
from bladeinspect.pipeline import blade_patches, exact_instances
from bladeinspect.segnet import SegNetConfig, TrainHyper, train_segmenter
from bladeinspect.slic import SlicConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def trained_segmenter():
    """A small segmenter trained on exact masks, plus held-out scenes from another seed."""
    synth = dict(image_size=(64, 64), blade_width_range=(10, 16))
    train = synth_generate(SynthConfig(n_images=30, n_negatives=10, seed=100, **synth))
    held = synth_generate(SynthConfig(n_images=10, n_negatives=5, seed=200, **synth))
    data = [TrainSample(s.image, s.blade_mask) for s in train.positives]
    data += [TrainSample(n, np.zeros(n.shape, bool), True) for n in train.negatives]
    ckpt = train_segmenter(data, SegNetConfig(input_size=(64, 64)), TrainHyper(epochs=15, seed=0))
    return ckpt, held


def scene_patches(ds, patch_size=32, n_clusters=60):
    """Superpixel patches cut from exact blade masks of a synthetic dataset."""
    out = []
    for scene in ds.positives:
        insts = exact_instances(scene.image, scene.blade_mask, ExtractConfig())
        for ip in blade_patches(scene.image.source_id, insts, SlicConfig(n_clusters=n_clusters),
                                PatchConfig(patch_size=patch_size), scene.defect_mask):
            out.extend(ip.patches)
    return out


@pytest.fixture(scope="session")
def normal_patches():
    ds = synth_generate(SynthConfig(n_images=14, n_negatives=0, seed=300))
    return scene_patches(ds)


@pytest.fixture(scope="session")
def defect_patches():
    ds = synth_generate(SynthConfig(n_images=8, n_negatives=0, seed=400, defect_rate=1.0))
    return scene_patches(ds)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one summary line per acceptance criterion."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split("] ")[1].split(".")[0])):
            terminalreporter.write_line(line)
