#!/usr/bin/env python3
"""
Contour network: feature sampling, circular convolution, the four stages
and the hand-written backward pass.
"""

import os
import sys
import logging
import unittest

import numpy as np

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.errors import ConfigError, KernelTooWide, StaleCache
from core.geometry import Polygon, rasterize
from core.model import (
    OFFSET_HEADS,
    FeatureGrid,
    ModelConfig,
    ModelParams,
    backward,
    circle_offsets,
    circular_conv,
    forward,
    global_deform,
    init_contour,
    parameter_shapes,
    refine,
    sample_features,
    sample_features_backward,
    stage_index,
)

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TOY = dict(n_vertices=16, channels=4, init_hidden=8, refine_channels=6, offset_scale=1.0, grid_size=(16, 16))


def random_setup(seed=0, zero_offset_heads=False, **overrides):
    cfg = ModelConfig(**{**TOY, **overrides})
    params = ModelParams.initialize(cfg, seed=seed, zero_offset_heads=zero_offset_heads)
    rng = np.random.default_rng(seed + 100)
    grid = FeatureGrid(rng.normal(0.0, 1.0, cfg.grid_size + (cfg.channels,)))
    return params, grid


class TestModelConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = ModelConfig()
        self.assertEqual((cfg.n_vertices, cfg.channels, cfg.kernel_width), (128, 64, 9))
        cfg.validate()

    def test_validation(self):
        with self.assertRaises(ConfigError):
            ModelConfig(kernel_width=8).validate()
        with self.assertRaises(ConfigError):
            ModelConfig(n_vertices=6, kernel_width=9).validate()
        with self.assertRaises(ConfigError):
            ModelConfig(init_mode="ellipse").validate()
        # the fast variant has no convolution, so a short contour is fine
        ModelConfig(n_vertices=6, use_refinement=False).validate()

    def test_stage_names(self):
        self.assertEqual(stage_index("final"), 3)
        self.assertEqual(stage_index("coarse"), 1)
        with self.assertRaises(ValueError):
            stage_index("iter3")


class TestFeatureSampling(unittest.TestCase):
    """Bilinear sampling from the feature grid"""

    def test_lattice_site(self):
        rng = np.random.default_rng(0)
        grid = FeatureGrid(rng.normal(size=(6, 7, 3)))
        feats, _ = sample_features(grid, [[3.5, 2.5], [0.5, 0.5], [6.5, 5.5]])
        np.testing.assert_array_equal(feats[0], grid.values[2, 3])
        np.testing.assert_array_equal(feats[1], grid.values[0, 0])
        np.testing.assert_array_equal(feats[2], grid.values[5, 6])

    def test_stride(self):
        rng = np.random.default_rng(1)
        grid = FeatureGrid(rng.normal(size=(4, 4, 2)), stride=2.0)
        feats, _ = sample_features(grid, [[3.0, 5.0]])
        np.testing.assert_allclose(feats[0], grid.values[2, 1])

    def test_constant_grid(self):
        grid = FeatureGrid(np.full((5, 5, 3), 0.75))
        pts = np.random.default_rng(2).uniform(-2, 7, (10, 2))
        feats, cache = sample_features(grid, pts)
        np.testing.assert_allclose(feats, 0.75)
        _, grad_points = sample_features_backward(cache, np.ones_like(feats))
        np.testing.assert_allclose(grad_points, 0.0, atol=1e-12)

    def test_clamped_outside(self):
        rng = np.random.default_rng(3)
        grid = FeatureGrid(rng.normal(size=(4, 4, 2)))
        feats, cache = sample_features(grid, [[-5.0, -5.0], [20.0, 1.5]])
        np.testing.assert_array_equal(feats[0], grid.values[0, 0])
        np.testing.assert_allclose(feats[1], grid.values[1, 3])
        _, grad_points = sample_features_backward(cache, np.ones_like(feats))
        self.assertEqual(grad_points[0, 0], 0.0)
        self.assertEqual(grad_points[1, 0], 0.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        grid = FeatureGrid(rng.normal(size=(8, 8, 3)))
        pts = rng.uniform(1.2, 6.8, (6, 2))
        weights = rng.normal(size=(6, 3))
        _, cache = sample_features(grid, pts)
        grad_grid, grad_points = sample_features_backward(cache, weights)

        def objective(p, values):
            return float(np.sum(sample_features(FeatureGrid(values), p)[0] * weights))

        h = 1e-6
        for i in range(6):
            for k in range(2):
                plus, minus = pts.copy(), pts.copy()
                plus[i, k] += h
                minus[i, k] -= h
                numeric = (objective(plus, grid.values) - objective(minus, grid.values)) / (2 * h)
                self.assertAlmostEqual(grad_points[i, k], numeric, delta=1e-5 * max(1.0, abs(numeric)))
        for idx in [(1, 1, 0), (3, 4, 2), (6, 5, 1)]:
            plus, minus = grid.values.copy(), grid.values.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric = (objective(pts, plus) - objective(pts, minus)) / (2 * h)
            self.assertAlmostEqual(grad_grid[idx], numeric, delta=1e-6)

    def test_from_mask(self):
        mask = rasterize(Polygon([[8, 8], [24, 8], [24, 24], [8, 24]]), 32, 32).bits
        grid = FeatureGrid.from_mask(mask, (16, 16), 6)
        self.assertEqual(grid.values.shape, (16, 16, 6))
        self.assertEqual(grid.stride, 2.0)
        self.assertTrue(np.all(np.isfinite(grid.values)))
        # signed distance is positive inside, negative outside
        self.assertGreater(grid.values[8, 8, 1], 0)
        self.assertLess(grid.values[0, 0, 1], 0)

        same = FeatureGrid.from_mask(mask, (32, 32), 3)
        np.testing.assert_array_equal(same.values[..., 0], mask.astype(float))
        self.assertEqual(same.stride, 1.0)


class TestCircularConv(unittest.TestCase):

    def test_identity_kernel(self):
        feats = np.random.default_rng(5).normal(size=(12, 4))
        kernel = np.zeros((9, 4, 4))
        kernel[4] = np.eye(4)
        np.testing.assert_array_equal(circular_conv(feats, kernel), feats)

    def test_constant_input(self):
        feats = np.full((10, 2), 3.0)
        kernel = np.zeros((3, 2, 1))
        kernel[:, :, 0] = 1.0 / 6.0
        np.testing.assert_allclose(circular_conv(feats, kernel), 3.0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(6)
        n, c_in, c_out, k = 11, 3, 2, 5
        feats = rng.normal(size=(n, c_in))
        kernel = rng.normal(size=(k, c_in, c_out))
        expected = np.zeros((n, c_out))
        r = k // 2
        for i in range(n):
            for t in range(k):
                for a in range(c_in):
                    expected[i] += feats[(i + t - r) % n, a] * kernel[t, a]
        np.testing.assert_allclose(circular_conv(feats, kernel), expected, atol=1e-12)

    def test_kernel_too_wide(self):
        with self.assertRaises(KernelTooWide):
            circular_conv(np.zeros((5, 2)), np.zeros((9, 2, 2)))


class TestStages(unittest.TestCase):
    """Initial, global and refinement stages"""

    def test_parameter_widths(self):
        shapes = parameter_shapes(ModelConfig(n_vertices=32, channels=8))
        self.assertEqual(shapes["global.w1"], (64, 264))
        self.assertEqual(shapes["global.w2"], (64, 64))
        self.assertEqual(shapes["init.w2"][0], 64)
        self.assertEqual(shapes["refine1.kernel"], (9, 10, 32))
        self.assertEqual(shapes["refine1.head_w"], (34, 2))

    def test_zero_heads_start_at_center(self):
        params, grid = random_setup(zero_offset_heads=True)
        for name in OFFSET_HEADS:
            self.assertFalse(params[name].any())
        center = np.array([7.3, 8.1])
        out = forward(center, params, grid)
        for name, contour in out.contours().items():
            self.assertEqual(contour.shape, (16, 2))
            np.testing.assert_array_equal(contour, np.tile(center, (16, 1)), err_msg=name)

    def test_bias_only_ring(self):
        params, grid = random_setup()
        params.tensors["init.w2"][:] = 0.0
        params.tensors["init.b2"][:] = circle_offsets(16, 3.0).ravel()
        center = np.array([8.0, 8.0])
        initial = init_contour(center, params, grid)
        np.testing.assert_allclose(np.hypot(*(initial - center).T), 3.0)

    def test_init_recomputed_independently(self):
        params, grid = random_setup(seed=1)
        center = np.array([6.2, 9.4])
        fc, _ = sample_features(grid, center)
        t = params.tensors
        hidden = np.maximum(t["init.w1"] @ fc[0] + t["init.b1"], 0.0)
        expected = center + (t["init.w2"] @ hidden + t["init.b2"]).reshape(-1, 2)
        np.testing.assert_allclose(init_contour(center, params, grid), expected, atol=1e-12)

    def test_circle_init_mode(self):
        params, grid = random_setup(init_mode="circle", circle_radius=5.0)
        out = forward([8.0, 8.0], params, grid)
        np.testing.assert_allclose(out.initial, 8.0 + circle_offsets(16, 5.0))

    def test_zero_global_head_keeps_initial(self):
        params, grid = random_setup(seed=2)
        params.tensors["global.w2"][:] = 0.0
        params.tensors["global.b2"][:] = 0.0
        initial = init_contour([8.0, 8.0], params, grid)
        np.testing.assert_array_equal(global_deform(initial, [8.0, 8.0], params, grid), initial)

    def test_zero_refine_head_keeps_contour(self):
        params, grid = random_setup(seed=3)
        params.tensors["refine1.head_w"][:] = 0.0
        params.tensors["refine1.head_b"][:] = 0.0
        contour = 8.0 + circle_offsets(16, 4.0)
        np.testing.assert_array_equal(refine(contour, params, grid, "refine1"), contour)

    def test_refine_shift_equivariance(self):
        params, grid = random_setup(seed=4)
        contour = 8.0 + circle_offsets(16, 4.0) + np.random.default_rng(4).normal(0, 0.5, (16, 2))
        base = refine(contour, params, grid, "refine2")
        for s in (1, 5, 11):
            shifted = refine(np.roll(contour, s, axis=0), params, grid, "refine2")
            np.testing.assert_array_equal(shifted, np.roll(base, s, axis=0))

    def test_fast_variant(self):
        params, grid = random_setup(seed=5, use_refinement=False)
        out = forward([8.0, 8.0], params, grid)
        np.testing.assert_array_equal(out.iter2, out.coarse)
        np.testing.assert_array_equal(out.iter1, out.coarse)
        self.assertEqual(out.computed, ("initial", "coarse"))

    def test_truncated_forward(self):
        params, grid = random_setup(seed=6)
        full = forward([8.0, 8.0], params, grid)
        short = forward([8.0, 8.0], params, grid, upto="coarse")
        np.testing.assert_array_equal(short.coarse, full.coarse)
        np.testing.assert_array_equal(short.final, short.coarse)

    def test_translation_of_center_and_grid(self):
        params, _ = random_setup(seed=7)
        rng = np.random.default_rng(7)
        values = np.zeros((16, 16, 4))
        values[4:10, 4:10] = rng.normal(size=(6, 6, 4))
        center = np.array([6.3, 7.1])
        moved = np.roll(values, (2, 3), axis=(0, 1))
        a = init_contour(center, params, FeatureGrid(values))
        b = init_contour(center + [3.0, 2.0], params, FeatureGrid(moved))
        np.testing.assert_allclose(b, a + [3.0, 2.0], atol=1e-12)

    def test_deterministic(self):
        params, grid = random_setup(seed=8)
        a = forward([8.0, 8.0], params, grid)
        b = forward([8.0, 8.0], params, grid)
        for name in ("initial", "coarse", "iter1", "iter2"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


class TestBackward(unittest.TestCase):
    """Reverse-mode gradients"""

    def test_zero_loss_gradients(self):
        params, grid = random_setup(seed=9)
        out = forward([8.0, 8.0], params, grid)
        grads, grid_grad = backward(out, params, grid, {})
        for name, g in grads.items():
            self.assertFalse(g.any(), name)
        self.assertFalse(grid_grad.any())

    def test_initial_only_supervision(self):
        params, grid = random_setup(seed=10)
        out = forward([8.0, 8.0], params, grid)
        g = np.random.default_rng(10).normal(size=(16, 2))
        grads, grid_grad = backward(out, params, grid, {"initial": g})
        for name, value in grads.items():
            if name.startswith("init."):
                self.assertTrue(value.any(), name)
            else:
                self.assertFalse(value.any(), name)
        self.assertTrue(grid_grad.any())

    def test_stale_cache(self):
        params, grid = random_setup(seed=11)
        out = forward([8.0, 8.0], params, grid)
        params.bump()
        with self.assertRaises(StaleCache):
            backward(out, params, grid, {"final": np.ones((16, 2))})

        out = forward([8.0, 8.0], params, grid)
        grid.bump()
        with self.assertRaises(StaleCache):
            backward(out, params, grid, {"final": np.ones((16, 2))})

    def test_linear_objective_finite_differences(self):
        params, grid = random_setup(seed=12)
        center = np.array([8.2, 7.7])
        rng = np.random.default_rng(12)
        weights = {stage: rng.normal(size=(16, 2)) for stage in ("initial", "coarse", "iter1", "iter2")}

        def objective():
            out = forward(center, params, grid)
            return sum(float(np.sum(getattr(out, s) * w)) for s, w in weights.items())

        grads, _ = backward(forward(center, params, grid), params, grid, weights)
        h = 1e-6
        for name in ("init.b1", "global.b1", "refine1.bias", "refine2.head_b"):
            tensor = params.tensors[name]
            for i in range(min(tensor.size, 4)):
                orig = tensor.flat[i]
                tensor.flat[i] = orig + h
                plus = objective()
                tensor.flat[i] = orig - h
                minus = objective()
                tensor.flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                self.assertAlmostEqual(grads[name].flat[i], numeric,
                                       delta=1e-4 * max(1.0, abs(numeric)), msg=f"{name}[{i}]")

    def test_params_copy_is_independent(self):
        params, _ = random_setup(seed=13)
        clone = params.copy()
        clone.tensors["init.w1"][0, 0] += 1.0
        self.assertNotEqual(clone["init.w1"][0, 0], params["init.w1"][0, 0])
        self.assertEqual(clone.num_parameters, params.num_parameters)


if __name__ == '__main__':
    unittest.main()
