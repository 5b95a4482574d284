"""Pseudo-label pipeline against brute-force oracles."""

import numpy as np
import pytest

from rsfnet import plg


def otsu_brute_force(m):
    """Maximize between-class variance over all 256 integer thresholds."""
    bins = np.clip(np.floor(np.asarray(m, dtype=np.float64)), 0, 255).astype(int).ravel()
    best_t, best_v = 0, -1.0
    for t in range(256):
        c0 = bins[bins <= t]
        c1 = bins[bins > t]
        if len(c0) == 0 or len(c1) == 0:
            v = 0.0
        else:
            w0 = len(c0) / len(bins)
            w1 = len(c1) / len(bins)
            v = w0 * w1 * (c0.mean() - c1.mean()) ** 2
        if v > best_v + 1e-9:
            best_v, best_t = v, t
    return best_t, best_v


def iou_brute_force(a, b):
    inter = union = 0
    for pa, pb in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        inter += bool(pa) and bool(pb)
        union += bool(pa) or bool(pb)
    return inter / union if union else 0.0


class TestGrayscale:
    def test_gray_invariance(self, rng):
        v = rng.uniform(0, 255, (5, 5))
        out = plg.to_grayscale(np.stack([v, v, v]))
        np.testing.assert_allclose(out, v, atol=1e-12)

    def test_pure_red(self):
        rgb = np.zeros((3, 2, 2))
        rgb[0] = 255.0
        assert plg.to_grayscale(rgb)[0, 0] == pytest.approx(76.245)

    def test_all_zero(self):
        np.testing.assert_array_equal(plg.to_grayscale(np.zeros((3, 4, 4))), 0.0)


class TestBoxMean:
    def test_matches_direct_loop(self, rng):
        img = rng.uniform(0, 255, (9, 7))
        r = 2
        got = plg.box_mean(img, r)
        h, w = img.shape
        for y in range(h):
            for x in range(w):
                y0, y1 = max(0, y - r), min(h - 1, y + r)
                x0, x1 = max(0, x - r), min(w - 1, x + r)
                expect = img[y0 : y1 + 1, x0 : x1 + 1].mean()
                assert got[y, x] == pytest.approx(expect, abs=1e-9)


class TestSaliency:
    def test_constant_image_all_zero(self):
        out = plg.fine_grained_saliency(np.full((16, 16), 99.0), (2, 4))
        np.testing.assert_array_equal(out, 0.0)

    def test_mirror_symmetry(self, rng):
        img = rng.uniform(0, 255, (12, 20))
        a = plg.fine_grained_saliency(img, (2, 3))
        b = plg.fine_grained_saliency(img[:, ::-1], (2, 3))
        np.testing.assert_allclose(a[:, ::-1], b, atol=1e-9)

    def test_single_bright_pixel_peaks_there(self):
        img = np.zeros((16, 16))
        img[9, 6] = 255.0
        sal = plg.fine_grained_saliency(img, (2, 4))
        assert np.unravel_index(np.argmax(sal), sal.shape) == (9, 6)
        assert sal.max() == pytest.approx(255.0)

    def test_translation_equivariance_in_interior(self, rng):
        img = np.zeros((24, 24))
        img[8:12, 8:12] = rng.uniform(180, 255, (4, 4))
        shifted = np.zeros_like(img)
        shifted[11:15, 10:14] = img[8:12, 8:12]
        a = plg.fine_grained_saliency(img, (2, 3))
        b = plg.fine_grained_saliency(shifted, (2, 3))
        # compare interiors away from borders (margin = max radius + shift)
        np.testing.assert_allclose(a[6:14, 6:14], b[9:17, 8:16], atol=1e-9)

    def test_empty_scales_rejected(self):
        with pytest.raises(ValueError, match="scale"):
            plg.fine_grained_saliency(np.zeros((8, 8)), ())

    def test_oversized_radius_rejected(self):
        with pytest.raises(ValueError, match="radius"):
            plg.fine_grained_saliency(np.zeros((8, 8)), (4,))


class TestOtsu:
    def test_two_population_map(self):
        m = np.zeros((8, 8))
        m[2:5, 1:6] = 255.0
        t, mask = plg.otsu_binarize(m)
        np.testing.assert_array_equal(mask, (m == 255).astype(np.uint8))
        assert t == otsu_brute_force(m)[0]

    def test_matches_brute_force_on_random_maps(self, rng):
        for _ in range(20):
            m = rng.integers(0, 256, size=(12, 12)).astype(np.float64)
            t, _ = plg.otsu_binarize(m)
            assert int(t) == otsu_brute_force(m)[0]

    def test_constant_map_degenerate(self):
        t, mask = plg.otsu_binarize(np.full((6, 6), 42.7))
        assert t == pytest.approx(42.7)
        assert mask.sum() == 0

    def test_two_level_map(self, rng):
        m = np.where(rng.random((10, 10)) < 0.4, 50.0, 200.0)
        t, mask = plg.otsu_binarize(m)
        assert 50 <= t <= 199
        np.testing.assert_array_equal(mask, (m == 200).astype(np.uint8))

    def test_threshold_within_value_range(self, rng):
        for _ in range(10):
            m = rng.uniform(30, 220, (9, 9))
            t, _ = plg.otsu_binarize(m)
            assert m.min() <= t <= m.max()

    def test_mask_invariant_under_integer_affine_rescaling(self, rng):
        # positive integer affine maps preserve bin order and distinctness
        m = rng.integers(0, 20, size=(10, 10)).astype(np.float64)
        t0, mask0 = plg.otsu_binarize(m)
        for a, b in ((2, 5), (3, 0), (10, 30)):
            t1, mask1 = plg.otsu_binarize(a * m + b)
            np.testing.assert_array_equal(mask0, mask1)
            assert t1 == pytest.approx(a * t0 + b)


class TestGroundTruthMask:
    def test_all_background(self):
        np.testing.assert_array_equal(plg.binarize_ground_truth(np.zeros((4, 4), int)), 0)

    def test_all_foreground(self):
        np.testing.assert_array_equal(plg.binarize_ground_truth(np.full((4, 4), 3)), 1)

    def test_mixed(self):
        y = np.array([[0, 1], [2, 0]])
        np.testing.assert_array_equal(plg.binarize_ground_truth(y), [[0, 1], [1, 0]])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            plg.binarize_ground_truth(np.array([[-1]]))
        with pytest.raises(ValueError, match="num_classes"):
            plg.binarize_ground_truth(np.array([[5]]), num_classes=3)


class TestIou:
    def test_identical_nonempty(self):
        m = np.eye(4, dtype=np.uint8)
        assert plg.iou_score(m, m) == 1.0

    def test_disjoint(self):
        a = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        b = np.array([[0, 0], [0, 1]], dtype=np.uint8)
        assert plg.iou_score(a, b) == 0.0

    def test_counting_example(self):
        a = np.zeros((4, 4), np.uint8)
        b = np.zeros((4, 4), np.uint8)
        a[0, :4] = 1  # 4 px
        b[0, 2:4] = 1
        b[1, 0:2] = 1  # 4 px, overlap 2, union 6
        assert plg.iou_score(a, b) == pytest.approx(1 / 3)

    def test_matches_brute_force(self, rng):
        for _ in range(25):
            a = rng.random((6, 6)) < 0.4
            b = rng.random((6, 6)) < 0.4
            assert plg.iou_score(a, b) == pytest.approx(iou_brute_force(a, b))

    def test_symmetry_and_range(self, rng):
        a = rng.random((8, 8)) < 0.5
        b = rng.random((8, 8)) < 0.5
        assert plg.iou_score(a, b) == plg.iou_score(b, a)
        assert 0.0 <= plg.iou_score(a, b) <= 1.0

    def test_empty_union_is_zero(self):
        z = np.zeros((3, 3), np.uint8)
        assert plg.iou_score(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            plg.iou_score(np.zeros((2, 2)), np.zeros((3, 3)))


class TestPseudoLabels:
    def test_all_background_gt_scores_zero(self, rng):
        rgb = rng.uniform(0, 255, (3, 16, 16))
        thm = rng.uniform(0, 255, (16, 16))
        pair = plg.generate_pseudo_labels(rgb, thm, np.zeros((16, 16), int), scales=(2, 4))
        assert pair.p_rgb == 0.0 and pair.p_thm == 0.0

    def test_perfect_overlap_scores_one(self):
        thm = np.zeros((16, 16))
        thm[6:9, 6:9] = 255.0
        gt = np.zeros((16, 16), int)
        gt[6:9, 6:9] = 1
        pair = plg.generate_pseudo_labels(np.zeros((3, 16, 16)), thm, gt, scales=(2, 4))
        assert pair.p_thm == 1.0

    def test_thermal_bright_square_beats_flat_rgb(self):
        thm = np.full((32, 32), 10.0)
        thm[10:18, 12:20] = 240.0
        rgb = np.full((3, 32, 32), 127.0)
        gt = np.zeros((32, 32), int)
        gt[10:18, 12:20] = 2
        pair = plg.generate_pseudo_labels(rgb, thm, gt, scales=(2, 4))
        assert pair.p_thm > pair.p_rgb

    def test_deterministic(self, rng):
        rgb = rng.uniform(0, 255, (3, 20, 20))
        thm = rng.uniform(0, 255, (20, 20))
        gt = (rng.random((20, 20)) < 0.3).astype(int)
        a = plg.generate_pseudo_labels(rgb, thm, gt)
        b = plg.generate_pseudo_labels(rgb.copy(), thm.copy(), gt.copy())
        assert a == b

    def test_extent_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="extent"):
            plg.generate_pseudo_labels(np.zeros((3, 8, 8)), np.zeros((9, 9)), np.zeros((8, 8), int))
