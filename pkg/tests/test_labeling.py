#!/usr/bin/env python3
"""
Label construction: instance midpoint, multi-direction aligned sampling,
interpolated candidates and key vertices.
"""

import math
import os
import sys
import logging
import unittest

import numpy as np

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from core.errors import CenterOutside, ConfigError
from core.geometry import (
    Polygon,
    boundary_arclength,
    distance_to_boundary,
    polygon_perimeter,
    ray_boundary_intersection,
    resample_uniform,
)
from core.labeling import MDAConfig, build_label, compute_center, fixed_vertex_indices, mda_sample

# Set up logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

SQUARE_2 = [[-1, -1], [1, -1], [1, 1], [-1, 1]]
THICK_L = [[0, 0], [4, 0], [4, 2], [2, 2], [2, 4], [0, 4]]


def star_polygon(rng, n, center=(16.0, 16.0), r_min=5.0, r_max=10.0):
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(r_min, r_max, n)
    pts = np.column_stack([center[0] + radii * np.cos(angles), center[1] + radii * np.sin(angles)])
    return Polygon(pts)


def rotate(points, theta, about):
    c, s = math.cos(theta), math.sin(theta)
    rel = np.asarray(points) - about
    return about + rel @ np.array([[c, s], [-s, c]])


def polar_error(point, center, expected):
    d = np.asarray(point) - center
    return abs(math.remainder(math.atan2(d[1], d[0]) - expected, 2 * math.pi))


class TestMDAConfig(unittest.TestCase):

    def test_defaults(self):
        cfg = MDAConfig()
        self.assertEqual((cfg.n_vertices, cfg.m_aligned, cfg.subsegments), (128, 4, 10))
        cfg.validate()

    def test_validation(self):
        with self.assertRaises(ConfigError):
            MDAConfig(n_vertices=32, m_aligned=5).validate()
        with self.assertRaises(ConfigError):
            MDAConfig(n_vertices=32, m_aligned=33).validate()
        with self.assertRaises(ConfigError):
            MDAConfig(key_source="sampled").validate()
        MDAConfig(n_vertices=32, m_aligned=0).validate()
        MDAConfig(n_vertices=32, m_aligned=32).validate()

    def test_fixed_indices(self):
        np.testing.assert_array_equal(fixed_vertex_indices(MDAConfig(n_vertices=8, m_aligned=4)), [0, 2, 4, 6])
        self.assertEqual(len(fixed_vertex_indices(MDAConfig(m_aligned=0))), 0)


class TestComputeCenter(unittest.TestCase):

    def test_square(self):
        np.testing.assert_allclose(compute_center(Polygon([[0, 0], [2, 0], [2, 2], [0, 2]])), [1, 1])

    def test_l_shape_falls_back_to_centroid(self):
        center = compute_center(Polygon(THICK_L))
        np.testing.assert_allclose(center, [5 / 3, 5 / 3], atol=1e-12)

    def test_translation(self):
        rng = np.random.default_rng(0)
        p = star_polygon(rng, 9)
        offset = np.array([3.25, -1.5])
        np.testing.assert_allclose(compute_center(p.translated(offset)), compute_center(p) + offset, atol=1e-12)

    def test_thin_l_has_no_interior_center(self):
        thin = Polygon([[0, 0], [4, 0], [4, 1], [1, 1], [1, 4], [0, 4]])
        with self.assertRaises(CenterOutside):
            compute_center(thin)


class TestMDASample(unittest.TestCase):
    """Aligned sampling of the ground-truth contour"""

    def test_square_four_directions(self):
        cfg = MDAConfig(n_vertices=8, m_aligned=4)
        out = mda_sample(Polygon(SQUARE_2), np.zeros(2), cfg)
        expected = [[1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1], [1, -1]]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_clockwise_input_sampled_counter_clockwise(self):
        cfg = MDAConfig(n_vertices=8, m_aligned=4)
        out = mda_sample(Polygon(SQUARE_2[::-1]), np.zeros(2), cfg)
        np.testing.assert_allclose(out[1], [1, 1], atol=1e-12)

    def test_fixed_directions(self):
        rng = np.random.default_rng(1)
        center = np.array([16.0, 16.0])
        for m in (1, 2, 4, 8):
            cfg = MDAConfig(n_vertices=32, m_aligned=m, start_angle=0.3)
            out = mda_sample(star_polygon(rng, 12), center, cfg)
            for j, idx in enumerate(fixed_vertex_indices(cfg)):
                self.assertLess(polar_error(out[idx], center, 0.3 + 2 * math.pi * j / m), 1e-9)

    def test_all_directions_degenerates_to_rays(self):
        rng = np.random.default_rng(2)
        p = star_polygon(rng, 12)
        center = np.array([16.0, 16.0])
        cfg = MDAConfig(n_vertices=16, m_aligned=16)
        out = mda_sample(p, center, cfg)
        rays = [ray_boundary_intersection(p, center, 2 * math.pi * j / 16) for j in range(16)]
        np.testing.assert_allclose(out, rays, atol=1e-9)

    def test_no_alignment_is_uniform_resampling(self):
        rng = np.random.default_rng(3)
        p = star_polygon(rng, 12)
        center = np.array([16.0, 16.0])
        out = mda_sample(p, center, MDAConfig(n_vertices=32, m_aligned=0))
        expected = resample_uniform(p, 32, ray_boundary_intersection(p, center, 0.0))
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_uniform_gaps_between_fixed_vertices(self):
        rng = np.random.default_rng(4)
        p = star_polygon(rng, 12)
        center = np.array([16.0, 16.0])
        out = mda_sample(p, center, MDAConfig(n_vertices=32, m_aligned=4))
        perimeter = polygon_perimeter(p)
        positions = np.array([boundary_arclength(p, q) for q in out])
        for q in out:
            self.assertLess(distance_to_boundary(q, p), 1e-9)
        for j in range(4):
            seg = np.append(positions[8 * j:8 * j + 8], positions[(8 * j + 8) % 32])
            gaps = np.mod(np.diff(seg), perimeter)
            np.testing.assert_allclose(gaps, gaps[0], atol=1e-9)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(5)
        p = star_polygon(rng, 10, center=(0.0, 0.0), r_min=0.5, r_max=1.0)
        center = np.zeros(2)
        theta = 0.7
        cfg = MDAConfig(n_vertices=32, m_aligned=4, start_angle=0.1)
        rotated_cfg = MDAConfig(n_vertices=32, m_aligned=4, start_angle=0.1 + theta)
        out = mda_sample(p, center, cfg)
        rotated = mda_sample(Polygon(rotate(p.vertices, theta, center)), center, rotated_cfg)
        np.testing.assert_allclose(rotated, rotate(out, theta, center), atol=1e-7)

    def test_more_directions_reduce_angular_deviation(self):
        rng = np.random.default_rng(6)
        center = np.array([16.0, 16.0])
        for _ in range(3):
            p = star_polygon(rng, 12, r_min=3.0, r_max=11.0)
            worst = {}
            for m in (1, 8):
                out = mda_sample(p, center, MDAConfig(n_vertices=32, m_aligned=m))
                worst[m] = max(polar_error(q, center, 2 * math.pi * i / 32) for i, q in enumerate(out))
            self.assertLessEqual(worst[8], worst[1] + 1e-12)


class TestBuildLabel(unittest.TestCase):

    def test_square_counts(self):
        label = build_label(Polygon(SQUARE_2), MDAConfig(n_vertices=4, m_aligned=4, subsegments=10,
                                                      start_angle=math.pi / 4))
        self.assertEqual(label.gt_interp.shape, (40, 2))
        p = Polygon(SQUARE_2)
        for q in label.gt_interp:
            self.assertLess(distance_to_boundary(q, p), 1e-12)

    def test_convex_keys_are_the_vertices(self):
        hexagon = Polygon([[4 + 3 * math.cos(a), 4 + 3 * math.sin(a)] for a in np.arange(6) * math.pi / 3])
        label = build_label(hexagon, MDAConfig(n_vertices=12, m_aligned=4, dp_eps=0.01))
        np.testing.assert_array_equal(label.gt_keys, hexagon.vertices)

    def test_random_defaults(self):
        rng = np.random.default_rng(7)
        p = star_polygon(rng, 30)
        label = build_label(p, MDAConfig())
        self.assertEqual(label.gt_contour.shape, (128, 2))
        self.assertEqual(len(label.gt_interp), 10 * 128)
        self.assertLessEqual(label.n_key, len(p))
        raw = {tuple(v) for v in label.raw_polygon.vertices.tolist()}
        self.assertTrue(all(tuple(k) in raw for k in label.gt_keys.tolist()))
        for q in label.gt_contour:
            self.assertLess(distance_to_boundary(q, label.raw_polygon), 1e-6)

    def test_keys_from_sampled_contour(self):
        rng = np.random.default_rng(8)
        p = star_polygon(rng, 30)
        label = build_label(p, MDAConfig(n_vertices=32, key_source="contour"))
        sampled = {tuple(v) for v in label.gt_contour.tolist()}
        self.assertTrue(all(tuple(k) in sampled for k in label.gt_keys.tolist()))

    def test_to_dict(self):
        label = build_label(Polygon(SQUARE_2), MDAConfig(n_vertices=8, m_aligned=4))
        data = label.to_dict()
        self.assertEqual(data['fixed_indices'], [0, 2, 4, 6])
        self.assertEqual(len(data['gt_contour']), 8)
        self.assertEqual(data['n_key'], 4)


if __name__ == '__main__':
    unittest.main()
