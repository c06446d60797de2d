import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from skimage.color import lab2rgb, rgb2lab

from bladeinspect.core import (
    BoundingBox,
    ColorSpace,
    ImageBuffer,
    InvalidColorSpace,
    ShapeError,
    box_iou,
    connected_components,
    lab_to_rgb,
    load_mask_png,
    mask_iou,
    rgb_to_lab,
    save_mask_png,
    threshold_mask,
    tight_bbox,
)


def _px(rgb):
    return ImageBuffer(np.array(rgb, dtype=np.float64).reshape(1, 1, 3))


class TestImageBuffer:
    def test_rejects_out_of_range_srgb(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2, 3), 1.5))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2, 3), np.nan))
        with pytest.raises(ValueError):
            ImageBuffer(np.full((2, 2, 3), 101.0), ColorSpace.LAB)

    def test_gray_needs_one_channel(self):
        with pytest.raises(ShapeError):
            ImageBuffer(np.zeros((2, 2, 3)), ColorSpace.GRAY)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            ImageBuffer(np.zeros((0, 4, 3)))


class TestLab:
    def test_black(self):
        np.testing.assert_allclose(rgb_to_lab(_px([0, 0, 0])).pixels.ravel(), 0.0, atol=1e-12)

    def test_white(self):
        l, a, b = rgb_to_lab(_px([1, 1, 1])).pixels.ravel()
        assert abs(l - 100) < 1e-6 and abs(a) < 0.01 and abs(b) < 0.01

    def test_red(self):
        # oracle: skimage's D65 conversion
        expected = rgb2lab(np.array([[[1.0, 0.0, 0.0]]])).ravel()
        got = rgb_to_lab(_px([1, 0, 0])).pixels.ravel()
        np.testing.assert_allclose(got, expected, atol=1e-3)
        np.testing.assert_allclose(got, [53.24, 80.09, 67.20], atol=0.01)

    def test_matches_skimage_on_random_pixels(self):
        # skimage rounds its XYZ matrix and white point differently: ~5e-3 apart
        rgb = np.random.default_rng(0).random((20, 50, 3))
        np.testing.assert_allclose(rgb_to_lab(ImageBuffer(rgb)).pixels, rgb2lab(rgb), atol=1e-2)

    def test_round_trip_1000_pixels(self):
        rgb = np.random.default_rng(1).random((1000, 1, 3))
        back = lab_to_rgb(rgb_to_lab(ImageBuffer(rgb))).pixels
        assert np.abs(back - rgb).max() < 1e-4

    def test_inverse_matches_skimage(self):
        rgb = np.random.default_rng(2).random((10, 10, 3))
        lab = rgb2lab(rgb)
        np.testing.assert_allclose(lab_to_rgb(ImageBuffer(lab, ColorSpace.LAB)).pixels, lab2rgb(lab), atol=1e-4)

    def test_wrong_space(self):
        lab = rgb_to_lab(_px([0.5, 0.5, 0.5]))
        with pytest.raises(InvalidColorSpace):
            rgb_to_lab(lab)


class TestThreshold:
    def test_examples(self):
        assert not threshold_mask(np.zeros((3, 3)), 0.5).any()
        assert threshold_mask(np.ones((3, 3)), 0.5).all()
        np.testing.assert_array_equal(threshold_mask(np.array([[0.4, 0.6]]), 0.5), [[False, True]])

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
    def test_t_outside_open_interval(self, t):
        with pytest.raises(ValueError):
            threshold_mask(np.zeros((2, 2)), t)

    @given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)),
           st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_monotone(self, raw, t1, t2):
        lo, hi = sorted((t1, t2))
        assert not (threshold_mask(raw, hi) & ~threshold_mask(raw, lo)).any()


def _bfs_components(mask, connectivity):
    """Independent flood-fill oracle."""
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                stack, pix = [(r, c)], set()
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    pix.add((y, x))
                    for dy, dx in steps:
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                comps.append(frozenset(pix))
    return comps


class TestComponents:
    def test_empty(self):
        assert connected_components(np.zeros((5, 5), bool)) == []

    def test_single_pixel(self):
        m = np.zeros((6, 6), bool)
        m[2, 3] = True
        (comp,) = connected_components(m)
        assert comp.area == 1
        assert comp.bbox == BoundingBox(3, 2, 4, 3)

    def test_diagonal_pair(self):
        m = np.zeros((4, 4), bool)
        m[1, 1] = m[2, 2] = True
        assert len(connected_components(m, 4)) == 2
        assert len(connected_components(m, 8)) == 1

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_partition_against_bfs_on_100_masks(self, connectivity):
        rng = np.random.default_rng(connectivity)
        for _ in range(100):
            m = rng.random((12, 12)) < 0.45
            comps = connected_components(m, connectivity)
            areas = [c.area for c in comps]
            assert areas == sorted(areas, reverse=True)
            union = np.zeros_like(m)
            for c in comps:
                assert not (union & c.mask).any()
                union |= c.mask
                assert c.bbox == tight_bbox(c.mask)
                assert c.area == c.mask.sum()
            np.testing.assert_array_equal(union, m)
            got = {frozenset(zip(*np.nonzero(c.mask))) for c in comps}
            assert got == set(_bfs_components(m, connectivity))


class TestIoU:
    def test_examples(self):
        a = np.zeros((7, 3), bool)
        b = np.zeros((7, 3), bool)
        a[0:5] = True
        b[2:7] = True
        assert mask_iou(a, a) == 1.0
        assert mask_iou(a, ~a) == 0.0
        assert mask_iou(a, b) == pytest.approx(3 / 7, abs=1e-12)

    def test_empty_pair(self):
        z = np.zeros((3, 3), bool)
        assert mask_iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mask_iou(np.zeros((2, 2), bool), np.zeros((3, 3), bool))

    @settings(max_examples=50)
    @given(arrays(bool, (5, 5)), arrays(bool, (5, 5)))
    def test_symmetric_and_identity(self, a, b):
        assert mask_iou(a, b) == mask_iou(b, a)
        if a.any() or b.any():
            assert (mask_iou(a, b) == 1.0) == bool(np.array_equal(a, b))

    def test_box_iou(self):
        assert box_iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_bbox_expand_clips():
    assert BoundingBox(1, 1, 3, 3).expand(5, (4, 6)) == BoundingBox(0, 0, 6, 4)


def test_mask_png_round_trip(tmp_path):
    m = np.random.default_rng(0).random((9, 11)) < 0.5
    save_mask_png(tmp_path / "a.png", m)
    back = load_mask_png(tmp_path / "a.png")
    np.testing.assert_array_equal(back, m)
    save_mask_png(tmp_path / "b.png", back)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    with Image.open(tmp_path / "a.png") as im:
        assert im.mode == "L"
        assert set(np.unique(np.asarray(im))) <= {0, 255}
