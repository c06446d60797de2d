import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import vae_gradient_error

from bladeinspect import anodet
from bladeinspect.anodet import (
    DetectorConfig,
    ScoredPatch,
    build_detector,
    calibrate_threshold,
    detector_loss,
    flag_anomalies,
    kl_standard_normal,
    load_detector,
    read_scores,
    save_detector,
    score,
    score_batch,
    train_detector,
    write_scores,
)
from bladeinspect.core import ShapeError
from bladeinspect.ingest import ConfigurationError
from bladeinspect.segnet import NumericalError
from bladeinspect.slic import PatchSample


def _cfg(kind="vae", **kw):
    base = dict(kind=kind, latent_dim=8, patch_size=32, base_channels=8, epochs=2, batch_size=16)
    base.update(kw)
    return DetectorConfig(**base)


class TestKL:
    def test_zero(self):
        assert kl_standard_normal(np.zeros(4), np.zeros(4)) == 0.0

    def test_unit_shift(self):
        assert kl_standard_normal(np.array([1.0, 0.0]), np.zeros(2)) == 0.5

    @settings(max_examples=100)
    @given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)))
    def test_nonnegative(self, mu, logvar):
        kl = kl_standard_normal(mu, logvar)
        assert kl >= 0
        if np.any(mu != 0) or np.any(logvar != 0):
            # the bound is only strict away from the origin; allow rounding near it
            assert kl > 0 or np.abs(np.concatenate([mu, logvar])).max() < 1e-7

    def test_torch_matches_numpy(self):
        rng = np.random.default_rng(0)
        mu, lv = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(kl_standard_normal(torch.from_numpy(mu), torch.from_numpy(lv)).numpy(),
                                   kl_standard_normal(mu, lv), atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(kind="gan"), dict(latent_dim=0), dict(lambda_latent=1.5),
                                    dict(patch_size=48), dict(patch_size=4)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            DetectorConfig(**kw)

    def test_skip_lambda_forced(self):
        assert DetectorConfig(kind="skip_ae", lambda_latent=0.7).effective_lambda == 0.0


class TestNetworks:
    @pytest.mark.parametrize("kind", ["vae", "latent_residual", "skip_ae"])
    @pytest.mark.parametrize("size", [8, 32, 64])
    def test_reconstruction_shape(self, kind, size):
        cfg = _cfg(kind, patch_size=size)
        net = build_detector(cfg)
        out = net(torch.rand(2, 3, size, size))
        assert out[0].shape == (2, 3, size, size)

    def test_skip_ae_cannot_copy_input(self):
        # the finest level has no skip: the output depends on the input only through coarser features
        net = build_detector(_cfg("skip_ae", patch_size=8))
        first_up = net.ups[-1][0]
        assert first_up.in_channels == net.downs[0][0].out_channels


def test_vae_gradient():
    assert vae_gradient_error() < 1e-3


def test_vae_loss_terms():
    cfg = DetectorConfig(kind="vae", latent_dim=2, patch_size=8, base_channels=2, beta=2.0)
    net = build_detector(cfg)
    x = torch.rand(3, 3, 8, 8)
    loss, recon = detector_loss(net, cfg, x, sample=False)
    _, mu, logvar = net(x, sample=False)
    expected = ((recon - x) ** 2).mean() + 2.0 * kl_standard_normal(mu, logvar).mean() / (3 * 8 * 8)
    assert loss.item() == pytest.approx(expected.item(), rel=1e-6)


class TestTraining:
    def test_empty(self):
        with pytest.raises(ConfigurationError):
            train_detector([], _cfg())

    def test_wrong_size(self, normal_patches):
        with pytest.raises(ShapeError):
            train_detector(normal_patches[:3], _cfg(patch_size=16))

    def test_zero_epochs(self, normal_patches):
        ckpt = train_detector(normal_patches[:10], _cfg(epochs=0, seed=5))
        assert ckpt.training_log == []
        init = build_detector(_cfg(seed=5)).state_dict()
        assert all(np.array_equal(ckpt.weights[k], init[k].numpy()) for k in init)

    @pytest.mark.parametrize("kind", ["vae", "latent_residual", "skip_ae"])
    def test_deterministic(self, normal_patches, kind):
        a = train_detector(normal_patches[:40], _cfg(kind))
        b = train_detector(normal_patches[:40], _cfg(kind))
        assert a.training_log == b.training_log

    def test_adversarial_branch_runs(self, normal_patches):
        ckpt = train_detector(normal_patches[:20], _cfg("latent_residual", adversarial=True, epochs=1))
        assert len(ckpt.training_log) == 1 and math.isfinite(ckpt.training_log[0].mean_loss)

    def test_nan_aborts(self, normal_patches, monkeypatch):
        monkeypatch.setattr(anodet, "detector_loss", lambda net, cfg, x: (x.sum() * np.nan, x))
        with pytest.raises(NumericalError, match="epoch 1, batch 1"):
            train_detector(normal_patches[:5], _cfg())

    def test_vae_loss_halves(self, normal_patches):
        assert len(normal_patches) >= 200
        ckpt = train_detector(normal_patches[:200], _cfg("vae", epochs=20, latent_dim=16))
        assert ckpt.training_log[-1].mean_loss < 0.5 * ckpt.training_log[0].mean_loss


@pytest.fixture(scope="module")
def trained(normal_patches):
    return {k: train_detector(normal_patches, _cfg(k, epochs=10, latent_dim=16))
            for k in ("vae", "latent_residual", "skip_ae")}


class TestScoring:
    @pytest.mark.parametrize("kind", ["vae", "latent_residual", "skip_ae"])
    def test_repeatable_and_order_free(self, trained, normal_patches, kind):
        ckpt = trained[kind]
        subset = normal_patches[:12]
        a = score_batch(ckpt, subset)
        b = score_batch(ckpt, subset[::-1])[::-1]
        c = [score(ckpt, p) for p in subset]
        for x, y, z in zip(a, b, c):
            assert x.score == pytest.approx(y.score, rel=1e-5) == z.score
            assert x.heatmap.shape == (32, 32) and (x.heatmap >= 0).all()
            assert math.isfinite(x.score) and x.score >= 0

    def test_skip_ae_score_is_mean_residual(self, trained, normal_patches):
        for sp in score_batch(trained["skip_ae"], normal_patches[:5]):
            assert sp.score == pytest.approx(float(sp.heatmap.mean()), abs=1e-12)

    def test_score_mix(self, trained, normal_patches):
        ckpt = trained["latent_residual"]
        net = ckpt.model()
        p = normal_patches[0]
        sp = score(ckpt, p)
        x = anodet._stack([p], ckpt.mean, ckpt.std)
        with torch.no_grad():
            _, z1, z2 = net(x)
        lam = ckpt.config.lambda_latent
        expected = (1 - lam) * sp.heatmap.mean() + lam * float((z1 - z2).norm())
        assert sp.score == pytest.approx(expected, rel=1e-5)

    @pytest.mark.parametrize("kind", ["vae", "latent_residual", "skip_ae"])
    def test_training_patch_below_p95(self, trained, normal_patches, kind):
        scores = [s.score for s in score_batch(trained[kind], normal_patches)]
        t = calibrate_threshold(scores, 0.95)
        assert np.median(scores) < t

    def test_defects_score_higher(self, trained, normal_patches, defect_patches):
        normal = np.median([s.score for s in score_batch(trained["skip_ae"], normal_patches)])
        bad = [p for p in defect_patches if p.defect_label == 1]
        assert bad
        assert np.median([s.score for s in score_batch(trained["skip_ae"], bad)]) > normal

    def test_size_mismatch(self, trained):
        with pytest.raises(ShapeError):
            score(trained["vae"], PatchSample(np.zeros((16, 16, 3)), "x", 0, 1.0))


class TestCalibration:
    def test_nearest_rank(self):
        assert calibrate_threshold(np.arange(1, 101), 0.95) == 95

    def test_all_equal(self):
        assert calibrate_threshold([3.5] * 7, 0.9) == 3.5

    def test_high_q_is_max(self):
        assert calibrate_threshold([5, 1, 9, 3], 0.999) == 9

    def test_independent_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = rng.normal(size=rng.integers(1, 60))
            q = rng.uniform(0.01, 0.99)
            assert calibrate_threshold(s, q) == np.percentile(s, q * 100, method="inverted_cdf")

    @pytest.mark.parametrize("scores,q", [([], 0.5), ([1.0], 0.0), ([1.0], 1.0)])
    def test_errors(self, scores, q):
        with pytest.raises(ValueError):
            calibrate_threshold(scores, q)


def _scored(values):
    rng = np.random.default_rng(0)
    return [ScoredPatch(PatchSample(np.zeros((4, 4, 3)), "img", i, 1.0), v, rng.random((4, 4)))
            for i, v in enumerate(values)]


class TestFlag:
    def test_empty(self):
        assert flag_anomalies([], 0.5) == []

    def test_all_below(self):
        assert flag_anomalies(_scored([0.1, 0.2]), 0.5) == []

    def test_everything_above_negative(self):
        flagged = flag_anomalies(_scored([0.0, 0.2, 3.0]), -1)
        assert len(flagged) == 3
        for f in flagged:
            assert f.mask.dtype == bool and f.mask.shape == (4, 4) and f.mask.any()

    def test_strictly_greater(self):
        assert [f.patch.sp_id for f in flag_anomalies(_scored([0.5, 0.6]), 0.5)] == [1]


class TestFormats:
    def test_detector_round_trip(self, tmp_path, normal_patches):
        ckpt = train_detector(normal_patches[:20], _cfg("latent_residual", epochs=1))
        ckpt.threshold = 0.123
        save_detector(tmp_path / "a.ckpt", ckpt)
        back = load_detector(tmp_path / "a.ckpt")
        assert back.config == ckpt.config and back.threshold == 0.123
        assert back.training_log == ckpt.training_log
        save_detector(tmp_path / "b.ckpt", back)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert [s.score for s in score_batch(ckpt, normal_patches[:4])] == \
            [s.score for s in score_batch(back, normal_patches[:4])]

    def test_wrong_kind_rejected(self, tmp_path):
        from bladeinspect.segnet import Checkpoint, SegNetConfig, TrainHyper, save_checkpoint
        save_checkpoint(tmp_path / "seg.ckpt", Checkpoint({}, SegNetConfig(input_size=(32, 32)), TrainHyper(), 0))
        with pytest.raises(ConfigurationError):
            load_detector(tmp_path / "seg.ckpt")

    def test_scores_csv_round_trip(self, tmp_path):
        scored = _scored([0.1, 1 / 3, 2.5e-7])
        rows = write_scores(tmp_path / "a.csv", scored, 0.2, tmp_path / "heat")
        back = read_scores(tmp_path / "a.csv")
        assert back == rows
        assert [r.flagged for r in back] == [False, True, False]
        anodet.write_score_rows(tmp_path / "b.csv", back)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        header = (tmp_path / "a.csv").read_text().splitlines()[0]
        assert header.startswith("image_id,sp_id,score,flagged")

    def test_heatmap_png_scale(self, tmp_path):
        from PIL import Image
        scored = _scored([1.0])
        (row,) = write_scores(tmp_path / "s.csv", scored, 0.5, tmp_path / "heat")
        with Image.open(tmp_path / "heat" / "img_0.png") as im:
            arr = np.asarray(im)
        assert arr.max() == 255
        np.testing.assert_allclose(arr / 255 * row.heatmap_scale, scored[0].heatmap, atol=row.heatmap_scale / 255)
