import math
import unittest

import ddt
import numpy as np

from portrait_rgbd.errors import ConfigurationError, DegenerateAlignmentError, EmptyMaskError, ShapeError
from portrait_rgbd.evalkit import (
    DepthMetrics, align_depth, audio_sync_correlation, boundary_continuity_ratio, depth_metrics, error_map,
    evaluate_depth, fit_scale_shift, mean_metrics, mouth_opening, normals_from_depth, psnr, raw_depth_metrics,
    relight, summary_table, to_positive_range
)


def loop_metrics(pred, gt):
    count = 0
    abs_rel = 0.0
    inliers = 0
    squared = 0.0
    for p, g in zip(pred.ravel(), gt.ravel()):
        count += 1
        abs_rel += abs(p - g) / g
        if max(p / g, g / p) < 1.25:
            inliers += 1
        squared += (p - g) ** 2
    return abs_rel / count, inliers / count, math.sqrt(squared / count)


def sphere_height(size=64, radius=0.9):
    spacing = 2.0 / size
    coords = (np.arange(size) + 0.5) * spacing - 1.0
    x, y = np.meshgrid(coords, coords)
    inside = x * x + y * y < radius * radius
    height = np.sqrt(np.maximum(radius * radius - x * x - y * y, 0.0))
    return height, x, y, inside, spacing


class TestAlignment(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.gt = self.rng.uniform(0.5, 2.0, (16, 16))

    def test_affine_prediction_aligns_exactly(self):
        pred = (self.gt - 0.3) / 2.5
        np.testing.assert_allclose(align_depth(pred, self.gt), self.gt, atol=1e-9)
        metrics = evaluate_depth(pred, self.gt, signed=False)
        self.assertLess(metrics.abs_rel, 1e-12)
        self.assertEqual(metrics.delta1, 1.0)
        self.assertLess(metrics.rmse, 1e-12)

    def test_scale_and_shift_match_the_normal_equations(self):
        pred = self.rng.standard_normal((16, 16))
        mask = self.rng.random((16, 16)) > 0.3
        p = pred[mask]
        g = self.gt[mask]
        lhs = np.array([[np.sum(p * p), np.sum(p)], [np.sum(p), len(p)]])
        rhs = np.array([np.sum(p * g), np.sum(g)])
        expected = np.linalg.solve(lhs, rhs)
        scale, shift = fit_scale_shift(pred, self.gt, mask)
        self.assertAlmostEqual(scale, expected[0], delta=1e-8)
        self.assertAlmostEqual(shift, expected[1], delta=1e-8)

    def test_constant_ground_truth_cannot_be_aligned(self):
        with self.assertRaises(DegenerateAlignmentError):
            fit_scale_shift(self.gt, np.ones((16, 16)))

    def test_empty_mask_raises(self):
        with self.assertRaises(EmptyMaskError):
            align_depth(self.gt, self.gt, np.zeros((16, 16), dtype=bool))

    def test_shape_mismatch_raises(self):
        with self.assertRaises(ShapeError):
            align_depth(self.gt[:8], self.gt)

    def test_positive_range_puts_the_minimum_at_a_tenth_of_the_range(self):
        gt = np.linspace(-1.0, 1.0, 11)
        pred, shifted = to_positive_range(gt * 0.5, gt)
        self.assertAlmostEqual(shifted.min(), 0.2)
        np.testing.assert_allclose(shifted - gt, 1.2)
        np.testing.assert_allclose(pred - gt * 0.5, 1.2)


class TestMetrics(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.gt = self.rng.uniform(0.5, 2.0, (12, 12))

    def test_metrics_match_a_scalar_loop(self):
        pred = self.gt * self.rng.uniform(0.7, 1.4, self.gt.shape)
        abs_rel, delta1, rmse = loop_metrics(pred, self.gt)
        metrics = depth_metrics(pred, self.gt)
        self.assertAlmostEqual(metrics.abs_rel, abs_rel, delta=1e-9)
        self.assertAlmostEqual(metrics.delta1, delta1, delta=1e-9)
        self.assertAlmostEqual(metrics.rmse, rmse, delta=1e-9)

    def test_uniform_overestimate_by_thirty_percent(self):
        metrics = raw_depth_metrics(1.3 * self.gt, self.gt)
        self.assertAlmostEqual(metrics.abs_rel, 0.3, places=12)
        self.assertEqual(metrics.delta1, 0.0)
        self.assertAlmostEqual(metrics.rmse, 0.3 * math.sqrt(np.mean(self.gt ** 2)), places=12)

    def test_mask_restricts_the_pixels(self):
        pred = self.gt.copy()
        pred[:6] *= 2.0
        mask = np.zeros(self.gt.shape, dtype=bool)
        mask[6:] = True
        self.assertEqual(depth_metrics(pred, self.gt, mask), DepthMetrics(0.0, 1.0, 0.0))

    def test_non_positive_ground_truth_is_rejected(self):
        with self.assertRaises(ConfigurationError):
            depth_metrics(self.gt, self.gt - 1.0)

    def test_signed_depth_is_shifted_before_ratios(self):
        gt = self.gt - 1.25
        metrics = raw_depth_metrics(gt, gt, signed=True)
        self.assertEqual(metrics, DepthMetrics(0.0, 1.0, 0.0))

    def test_mean_metrics_averages_each_column(self):
        mean = mean_metrics([DepthMetrics(0.1, 0.5, 0.2), DepthMetrics(0.3, 1.0, 0.4)])
        for value, expected in zip(mean, (0.2, 0.75, 0.3)):
            self.assertAlmostEqual(value, expected)
        with self.assertRaises(ConfigurationError):
            mean_metrics([])

    def test_summary_table_prints_three_decimals(self):
        table = summary_table([('oracle', DepthMetrics(0.0, 1.0, 0.0))], title='eval_studio')
        lines = table.splitlines()
        self.assertEqual(lines[0], 'eval_studio')
        self.assertIn('AbsRel', lines[1])
        self.assertIn('δ1', lines[1])
        self.assertEqual(lines[3].split(), ['oracle', '0.000', '1.000', '0.000'])
        self.assertIn('normalized', lines[-1])


@ddt.ddt
class TestErrorMap(unittest.TestCase):
    def setUp(self):
        self.gt = np.full((4, 4), 1.0)

    def test_no_error_is_white(self):
        np.testing.assert_array_equal(error_map(self.gt, self.gt), np.ones((4, 4, 3)))

    @ddt.data((0.1, [1.0, 0.0, 0.0]), (-0.1, [0.0, 0.0, 1.0]), (0.5, [1.0, 0.0, 0.0]))
    @ddt.unpack
    def test_clamped_endpoints(self, offset, colour):
        image = error_map(self.gt + offset, self.gt)
        np.testing.assert_allclose(image[0, 0], colour, atol=1e-12)

    def test_signs_are_antisymmetric(self):
        offsets = np.linspace(-0.08, 0.08, 16).reshape(4, 4)
        over = error_map(self.gt + offsets, self.gt)
        under = error_map(self.gt - offsets, self.gt)
        np.testing.assert_allclose(over[..., 0], under[..., 2], atol=1e-12)
        np.testing.assert_allclose(over[..., 1], under[..., 1], atol=1e-12)

    def test_outside_the_mask_is_gray(self):
        mask = np.ones((4, 4), dtype=bool)
        mask[0] = False
        image = error_map(self.gt + 0.05, self.gt, mask)
        np.testing.assert_array_equal(image[0], 0.5)


class TestNormalsAndRelighting(unittest.TestCase):
    def test_flat_plane_faces_the_viewer(self):
        normals = normals_from_depth(np.full((8, 8), 3.0))
        np.testing.assert_array_equal(normals[:2], 0.0)
        np.testing.assert_array_equal(normals[2], 1.0)

    def test_tilted_plane_matches_the_closed_form(self):
        slope = 0.5
        depth = slope * np.arange(8.0)[None, :].repeat(6, axis=0)
        normals = normals_from_depth(depth)
        expected = np.array([-slope, 0.0, 1.0]) / math.sqrt(1.0 + slope * slope)
        np.testing.assert_allclose(normals.reshape(3, -1).T, np.tile(expected, (48, 1)), atol=1e-12)

    def test_sphere_normals_are_within_three_degrees(self):
        height, x, y, inside, spacing = sphere_height()
        normals = normals_from_depth(height, spacing)
        interior = inside & (x * x + y * y < 0.7)
        expected = np.stack([x, y, height]) / 0.9
        cosines = np.clip(np.sum(normals * expected, axis=0)[interior], -1.0, 1.0)
        self.assertLess(np.degrees(np.arccos(cosines)).mean(), 3.0)

    def test_full_ambient_is_the_identity(self):
        rgb = np.random.default_rng(0).uniform(0.0, 1.0, (3, 8, 8))
        height, _, _, _, spacing = sphere_height(8)
        np.testing.assert_allclose(relight(rgb, normals_from_depth(height, spacing), (0.3, -0.2, 1.0), 1.0), rgb)

    def test_flat_plane_under_frontal_light_is_unchanged(self):
        rgb = np.random.default_rng(0).uniform(0.0, 1.0, (3, 8, 8))
        normals = normals_from_depth(np.zeros((8, 8)))
        np.testing.assert_allclose(relight(rgb, normals, (0.0, 0.0, 1.0)), rgb)
        np.testing.assert_allclose(relight(rgb, normals, (1.0, 0.0, 0.0)), 0.2 * rgb)

    def test_light_from_the_left_brightens_the_left(self):
        height, x, _, inside, spacing = sphere_height()
        lit = relight(np.full((3,) + height.shape, 0.8), normals_from_depth(height, spacing), (-1.0, 0.0, 0.5))
        self.assertGreater(lit[0][inside & (x < -0.3)].mean(), lit[0][inside & (x > 0.3)].mean())

    def test_mirroring_the_scene_mirrors_the_result(self):
        rng = np.random.default_rng(2)
        rgb = rng.uniform(0.0, 1.0, (3, 16, 16))
        depth = rng.uniform(0.0, 1.0, (16, 16))
        light = np.array([0.4, -0.3, 0.8])
        mirrored_light = light * np.array([-1.0, 1.0, 1.0])
        result = relight(rgb, normals_from_depth(depth), light)
        mirrored = relight(rgb[:, :, ::-1], normals_from_depth(depth[:, ::-1]), mirrored_light)
        np.testing.assert_allclose(mirrored, result[:, :, ::-1], atol=1e-12)

    def test_zero_light_raises(self):
        with self.assertRaises(ConfigurationError):
            relight(np.zeros((3, 2, 2)), normals_from_depth(np.zeros((2, 2))), (0.0, 0.0, 0.0))

    def test_normals_need_a_two_dimensional_map(self):
        with self.assertRaises(ShapeError):
            normals_from_depth(np.zeros((2, 3, 3)))


class TestClipStatistics(unittest.TestCase):
    def test_mouth_opening_tracks_the_region_depth(self):
        depths = np.ones((3, 4, 4))
        region = np.zeros((4, 4), dtype=bool)
        region[2:, 1:3] = True
        depths[:, region] += np.array([0.0, 0.1, 0.2])[:, None]
        np.testing.assert_allclose(mouth_opening(depths, region), [0.0, 0.1, 0.2])

    def test_empty_mouth_region_raises(self):
        with self.assertRaises(EmptyMaskError):
            mouth_opening(np.ones((2, 3, 3)), np.zeros((3, 3)))

    def test_sync_correlation(self):
        signal = np.linspace(0.0, 1.0, 20)
        self.assertAlmostEqual(audio_sync_correlation(signal, 2.0 * signal + 1.0), 1.0)
        self.assertEqual(audio_sync_correlation(signal, np.ones(20)), 0.0)

    def test_even_motion_has_unit_continuity_ratio(self):
        frames = np.arange(10.0)[:, None, None] * np.ones((10, 2, 2))
        self.assertAlmostEqual(boundary_continuity_ratio(frames, 4), 1.0)

    def test_jump_at_the_boundary_raises_the_ratio(self):
        frames = np.arange(8.0)[:, None, None] * np.ones((8, 2, 2))
        frames[4:] += 5.0
        self.assertAlmostEqual(boundary_continuity_ratio(frames, 4), 6.0)

    def test_clip_without_boundary_raises(self):
        with self.assertRaises(ConfigurationError):
            boundary_continuity_ratio(np.zeros((4, 2, 2)), 4)

    def test_psnr(self):
        image = np.zeros((4, 4))
        self.assertEqual(psnr(image, image), float('inf'))
        self.assertAlmostEqual(psnr(image + 0.2, image), 10.0 * math.log10(4.0 / 0.04))
